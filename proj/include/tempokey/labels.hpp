#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>

#include "tempokey/error.hpp"

namespace tk {

inline constexpr int kMinBpm = 30;
inline constexpr int kMaxBpm = 285;
inline constexpr std::size_t kTempoClasses = 256;
inline constexpr std::size_t kKeyClasses = 24;

// ---------------------------------------------------------------------------
// Tempo
// ---------------------------------------------------------------------------

struct TempoLabel {
  int bpm = 120;
  friend bool operator==(const TempoLabel&, const TempoLabel&) = default;
};

inline std::size_t tempo_to_class(int bpm) {
  if (bpm < kMinBpm || bpm > kMaxBpm) {
    throw RangeError("tempo " + std::to_string(bpm) + " BPM outside [30, 285]");
  }
  return static_cast<std::size_t>(bpm - kMinBpm);
}

inline int class_to_tempo(std::size_t index) {
  if (index >= kTempoClasses) {
    throw RangeError("tempo class " + std::to_string(index) + " outside [0, 255]");
  }
  return static_cast<int>(index) + kMinBpm;
}

// The eleven time-scale factors 0.80, 0.84, ..., 1.20.
inline constexpr std::array<double, 11> kTimeScaleFactors = {
    0.80, 0.84, 0.88, 0.92, 0.96, 1.00, 1.04, 1.08, 1.12, 1.16, 1.20};

inline bool is_time_scale_factor(double s) {
  return std::any_of(kTimeScaleFactors.begin(), kTimeScaleFactors.end(),
                     [s](double f) { return std::abs(f - s) < 1e-9; });
}

// Stretching the time axis by s > 1 slows the music down: bpm' = bpm / s.
inline TempoLabel scale_tempo_label(TempoLabel label, double s) {
  if (!is_time_scale_factor(s)) {
    throw RangeError("time-scale factor " + std::to_string(s) + " not in {0.8, 0.84, ..., 1.2}");
  }
  const auto scaled = static_cast<int>(std::lround(label.bpm / s));
  return {std::clamp(scaled, kMinBpm, kMaxBpm)};
}

// ---------------------------------------------------------------------------
// Key
// ---------------------------------------------------------------------------

enum class KeyMode { major = 0, minor = 1 };

struct KeyLabel {
  int tonic = 0;  // pitch class, 0 = C
  KeyMode mode = KeyMode::major;
  friend bool operator==(const KeyLabel&, const KeyLabel&) = default;
};

inline constexpr std::array<std::string_view, 12> kPitchNames = {
    "c", "c#", "d", "d#", "e", "f", "f#", "g", "g#", "a", "a#", "b"};

inline std::size_t key_to_class(KeyLabel label) {
  if (label.tonic < 0 || label.tonic > 11) {
    throw RangeError("key tonic " + std::to_string(label.tonic) + " outside [0, 11]");
  }
  return static_cast<std::size_t>(label.tonic) + (label.mode == KeyMode::minor ? 12 : 0);
}

inline KeyLabel class_to_key(std::size_t index) {
  if (index >= kKeyClasses) {
    throw RangeError("key class " + std::to_string(index) + " outside [0, 23]");
  }
  return {static_cast<int>(index % 12), index >= 12 ? KeyMode::minor : KeyMode::major};
}

inline constexpr int kMinKeyShift = -4;
inline constexpr int kMaxKeyShift = 7;

// Label for a crop whose window moved up by s semitones: content appears s
// semitones lower, so the tonic drops by s.
inline KeyLabel shift_key_label(KeyLabel label, int s) {
  if (s < kMinKeyShift || s > kMaxKeyShift) {
    throw RangeError("key shift " + std::to_string(s) + " outside [-4, 7]");
  }
  key_to_class(label);
  return {((label.tonic - s) % 12 + 12) % 12, label.mode};
}

// Canonical form: lowercase sharp tonic + ":maj" / ":min", e.g. "c#:min".
inline std::string key_name(KeyLabel label) {
  key_to_class(label);
  return std::string(kPitchNames[static_cast<std::size_t>(label.tonic)]) +
         (label.mode == KeyMode::major ? ":maj" : ":min");
}

// Accepts "C:maj", "c#:min", "Db minor", "F# major", "Bb:minor", ...
// Enharmonic spellings map to the same pitch class.
inline KeyLabel parse_key(std::string_view text) {
  auto fail = [&]() -> KeyLabel {
    throw DataError("cannot parse key '" + std::string(text) + "'");
  };
  std::string s;
  for (char c : text) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return fail();
  s = s.substr(first, s.find_last_not_of(" \t") - first + 1);

  static constexpr std::array<int, 7> kNatural = {9, 11, 0, 2, 4, 5, 7};  // a..g
  if (s.empty() || s[0] < 'a' || s[0] > 'g') return fail();
  int tonic = kNatural[static_cast<std::size_t>(s[0] - 'a')];
  std::size_t pos = 1;
  while (pos < s.size() && (s[pos] == '#' || s[pos] == 'b')) {
    tonic += s[pos] == '#' ? 1 : -1;
    ++pos;
  }
  tonic = ((tonic % 12) + 12) % 12;

  std::string_view rest(s);
  rest.remove_prefix(pos);
  while (!rest.empty() && (rest.front() == ':' || rest.front() == ' ' || rest.front() == '\t')) {
    rest.remove_prefix(1);
  }
  KeyMode mode;
  if (rest == "maj" || rest == "major") {
    mode = KeyMode::major;
  } else if (rest == "min" || rest == "minor") {
    mode = KeyMode::minor;
  } else {
    return fail();
  }
  return {tonic, mode};
}

}  // namespace tk
