#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tempokey/dsp.hpp"
#include "tempokey/labels.hpp"
#include "tempokey/model.hpp"

namespace tk {

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string path;     // as written in the manifest
  std::string label;    // bpm integer or key name
  std::string dataset;
  std::size_t target = 0;  // class index under the manifest's task

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline constexpr std::string_view kManifestHeader = "id,path,label,dataset";

// Class index of a label field under a task. Throws RangeError for labels
// that parse but fall outside the class range, DataError otherwise.
inline std::size_t parse_label(std::string_view text, Task task) {
  if (task == Task::key) return key_to_class(parse_key(text));
  int bpm = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, bpm);
  if (ec != std::errc() || ptr != end) {
    throw DataError("tempo label '" + std::string(text) + "' is not an integer");
  }
  return tempo_to_class(bpm);
}

inline std::string format_label(std::size_t target, Task task) {
  return task == Task::tempo ? std::to_string(class_to_tempo(target))
                             : key_name(class_to_key(target));
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline std::vector<ManifestEntry> parse_manifest(std::istream& in, Task task,
                                                 const std::string& source = "manifest") {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kManifestHeader) {
    throw DataError(source + ": expected header '" + std::string(kManifestHeader) + "'");
  }
  std::vector<ManifestEntry> entries;
  std::set<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    const std::string where = source + ":" + std::to_string(line_no);
    if (fields.size() != 4) throw DataError(where + ": expected 4 fields");
    ManifestEntry e{fields[0], fields[1], fields[2], fields[3], 0};
    if (e.id.empty() || e.path.empty()) throw DataError(where + ": empty id or path");
    try {
      e.target = parse_label(e.label, task);
    } catch (const RangeError& err) {
      throw RangeError(where + ": " + err.what());
    }
    if (!ids.insert(e.id).second) throw DataError(where + ": duplicate id '" + e.id + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path, Task task) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path + "'");
  return parse_manifest(in, task, path);
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest '" + path + "'");
  out << kManifestHeader << '\n';
  for (const auto& e : entries) {
    out << e.id << ',' << e.path << ',' << e.label << ',' << e.dataset << '\n';
  }
  if (!out) throw DataError("failed writing manifest '" + path + "'");
}

// Manifest paths are relative to the manifest's directory.
inline std::filesystem::path resolve_entry_path(const std::string& manifest_path,
                                                const ManifestEntry& e) {
  const std::filesystem::path p(e.path);
  if (p.is_absolute()) return p;
  return std::filesystem::path(manifest_path).parent_path() / p;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;

  void validate() const {
    if (train < 0 || validation < 0 || test < 0 || train + validation + test > 1.0 + 1e-9) {
      throw RangeError("split fractions must be non-negative and sum to at most 1");
    }
  }
};

struct SplitSpec {
  SplitFractions fallback;                        // tags without an entry
  std::map<std::string, SplitFractions> per_tag;  // by dataset tag
  std::uint64_t seed = 0;

  const SplitFractions& fractions_for(const std::string& tag) const {
    const auto it = per_tag.find(tag);
    return it == per_tag.end() ? fallback : it->second;
  }
};

struct Splits {
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> validation;
  std::vector<ManifestEntry> test;
};

// Per tag (sorted): shuffle, then floor each share; when the fractions sum
// to 1 the remainder goes to train.
inline Splits split(const std::vector<ManifestEntry>& entries, const SplitSpec& spec) {
  std::map<std::string, std::vector<const ManifestEntry*>> groups;
  for (const auto& e : entries) groups[e.dataset].push_back(&e);
  Rng rng(spec.seed);
  Splits out;
  for (auto& [tag, members] : groups) {
    const auto& f = spec.fractions_for(tag);
    f.validate();
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = static_cast<double>(members.size());
    auto share = [n](double frac) { return static_cast<std::size_t>(std::floor(frac * n + 1e-9)); };
    const std::size_t n_val = share(f.validation);
    const std::size_t n_test = share(f.test);
    std::size_t n_train = share(f.train);
    if (std::abs(f.train + f.validation + f.test - 1.0) < 1e-9) {
      n_train = members.size() - n_val - n_test;
    }
    std::size_t i = 0;
    for (; i < n_train; ++i) out.train.push_back(*members[i]);
    for (; i < n_train + n_val; ++i) out.validation.push_back(*members[i]);
    for (; i < n_train + n_val + n_test; ++i) out.test.push_back(*members[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic audio
// ---------------------------------------------------------------------------

namespace detail {

inline void scale_to_peak(std::vector<float>& x, double peak) {
  float m = 0;
  for (float v : x) m = std::max(m, std::abs(v));
  if (m == 0) return;
  const auto g = static_cast<float>(peak / m);
  for (float& v : x) v *= g;
}

}  // namespace detail

// Envelope decay of a click, as a fraction of the beat period.
inline constexpr double kClickDecay = 0.12;

// Noise-burst clicks every 60/bpm seconds, first click at a random phase.
// Each burst decays over a fixed fraction of the beat period, so the
// distribution of frame spectra does not depend on the tempo. Low-pass
// timbre is drawn per clip; a white noise floor sits 20 dB below the mean
// click power.
inline AudioBuffer synth_click_track(double bpm, double duration, int sample_rate, Rng& rng) {
  if (bpm < kMinBpm || bpm > kMaxBpm) {
    throw RangeError("click track tempo must lie in [30, 285] BPM");
  }
  if (duration <= 0 || sample_rate <= 0) throw RangeError("click track needs positive duration");
  const double period = 60.0 / bpm;
  const double phase = std::uniform_real_distribution<double>(0.0, period)(rng);
  const double smoothing = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
  std::normal_distribution<double> noise(0.0, 1.0);

  const auto n = static_cast<std::size_t>(std::llround(duration * sample_rate));
  AudioBuffer out{std::vector<float>(n), sample_rate};
  // Mean of exp(-2 phi / decay) over one period.
  const double click_power = kClickDecay / 2.0 * (1.0 - std::exp(-2.0 / kClickDecay));
  const double floor_sigma = std::sqrt(click_power / 100.0);
  double lowpass = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate - phase;
    const double phi = t / period - std::floor(t / period);
    lowpass = (1.0 - smoothing) * noise(rng) + smoothing * lowpass;
    const double click = std::exp(-phi / kClickDecay) * lowpass;
    out.samples[i] = static_cast<float>(click + floor_sigma * noise(rng));
  }
  detail::scale_to_peak(out.samples, 0.5);
  return out;
}

// Diatonic triads: roots relative to the tonic and chord quality.
struct Triad {
  int root;
  bool minor;
};

inline std::array<Triad, 4> key_triads(KeyMode mode) {
  if (mode == KeyMode::major) return {{{0, false}, {5, false}, {7, false}, {9, true}}};
  return {{{0, true}, {5, true}, {7, true}, {8, false}}};
}

// Chord progression over the key's I/IV/V/vi (i/iv/v/VI) triads, starting on
// the tonic chord and returning to it with probability 0.4 at each change.
// Each chord lasts 0.75-1.25 s and sounds three harmonic tones (six
// partials, amplitude 1/h) placed at random octaves 2-5.
inline AudioBuffer synth_key_clip(KeyLabel key, double duration, int sample_rate, Rng& rng) {
  key_to_class(key);
  if (duration <= 0 || sample_rate <= 0) throw RangeError("key clip needs positive duration");
  const auto triads = key_triads(key.mode);
  const auto n = static_cast<std::size_t>(std::llround(duration * sample_rate));
  AudioBuffer out{std::vector<float>(n, 0.0f), sample_rate};
  std::uniform_real_distribution<double> chord_len(0.75, 1.25);
  std::uniform_int_distribution<int> octave(2, 5);
  std::uniform_int_distribution<int> other(1, 3);
  std::bernoulli_distribution back_to_tonic(0.4);
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);

  const double ramp = 0.01 * sample_rate;
  std::size_t start = 0;
  std::size_t chord = 0;
  while (start < n) {
    const std::size_t len =
        std::min(n - start, static_cast<std::size_t>(chord_len(rng) * sample_rate));
    const Triad t = triads[chord];
    const std::array<int, 3> intervals = {0, t.minor ? 3 : 4, 7};
    for (int iv : intervals) {
      const int pc = (key.tonic + t.root + iv) % 12;
      const int midi = 12 * (octave(rng) + 1) + pc;
      const double f0 = 440.0 * std::pow(2.0, (midi - 69) / 12.0);
      for (int h = 1; h <= 6; ++h) {
        const double f = f0 * h;
        if (f >= sample_rate / 2.0) break;
        const double w = 2 * std::numbers::pi * f / sample_rate;
        const double p = phase(rng);
        for (std::size_t i = 0; i < len; ++i) {
          const double env = std::min({1.0, i / ramp, (len - i) / ramp});
          out.samples[start + i] += static_cast<float>(env / h * std::sin(w * i + p));
        }
      }
    }
    start += len;
    chord = back_to_tonic(rng) ? 0 : static_cast<std::size_t>(other(rng));
  }
  std::normal_distribution<double> noise(0.0, 1e-3);
  detail::scale_to_peak(out.samples, 0.5);
  for (float& v : out.samples) v += static_cast<float>(noise(rng));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

struct SynthOptions {
  Task task = Task::tempo;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  int min_bpm = 60;
  int max_bpm = 180;
  double tempo_seconds = 30.0;
  double key_seconds = 30.0;
  std::string dataset = "synth";
};

// Independent stream per clip so clips can be generated in any order.
inline Rng clip_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

// Labels only: tempi uniform over [min_bpm, max_bpm]; keys cycle through all
// 24 classes in a shuffled order.
inline std::vector<std::size_t> synth_targets(const SynthOptions& opt) {
  std::vector<std::size_t> targets(opt.count);
  Rng rng(opt.seed);
  if (opt.task == Task::tempo) {
    tempo_to_class(opt.min_bpm);
    tempo_to_class(opt.max_bpm);
    if (opt.min_bpm > opt.max_bpm) throw RangeError("synth: min_bpm > max_bpm");
    std::uniform_int_distribution<int> bpm(opt.min_bpm, opt.max_bpm);
    for (auto& t : targets) t = tempo_to_class(bpm(rng));
  } else {
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i % kKeyClasses;
    std::shuffle(targets.begin(), targets.end(), rng);
  }
  return targets;
}

inline AudioBuffer synth_clip(const SynthOptions& opt, std::size_t target, std::size_t index) {
  Rng rng = clip_rng(opt.seed, index);
  if (opt.task == Task::tempo) {
    return synth_click_track(class_to_tempo(target), opt.tempo_seconds,
                             tempo_spectrogram_spec().sample_rate, rng);
  }
  return synth_key_clip(class_to_key(target), opt.key_seconds,
                        key_spectrogram_spec().sample_rate, rng);
}

// Writes <out_dir>/<id>.wav for every clip plus <out_dir>/manifest.csv.
inline std::vector<ManifestEntry> write_synth_corpus(const std::string& out_dir,
                                                     const SynthOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto targets = synth_targets(opt);
  std::vector<ManifestEntry> entries;
  const int width = static_cast<int>(std::to_string(std::max<std::size_t>(opt.count, 1) - 1).size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::ostringstream id;
    id << task_name(opt.task) << '-' << std::setw(std::max(width, 4)) << std::setfill('0') << i;
    const std::string file = id.str() + ".wav";
    write_wav((fs::path(out_dir) / file).string(), synth_clip(opt, targets[i], i));
    entries.push_back({id.str(), file, format_label(targets[i], opt.task), opt.dataset,
                       targets[i]});
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), entries);
  return entries;
}

// ---------------------------------------------------------------------------
// Loading spectrograms for a manifest
// ---------------------------------------------------------------------------

inline SpectrogramSpec spectrogram_spec_for(Task task) {
  return task == Task::tempo ? tempo_spectrogram_spec() : key_spectrogram_spec();
}

// Cache file name for an entry: <cache_dir>/<id>.tksp
inline std::filesystem::path cache_path(const std::string& cache_dir, const ManifestEntry& e) {
  return std::filesystem::path(cache_dir) / (e.id + ".tksp");
}

// Full-track spectrogram of an entry: the path itself if it is a .tksp cache,
// else a cache under cache_dir when present, else computed from audio.
inline Spectrogram entry_spectrogram(const std::string& manifest_path, const ManifestEntry& e,
                                     Task task, const std::string& cache_dir = "") {
  namespace fs = std::filesystem;
  const fs::path src = resolve_entry_path(manifest_path, e);
  const SpectrogramSpec spec = spectrogram_spec_for(task);
  auto check = [&](Spectrogram s) {
    if (s.spec.kind != spec.kind || s.bins() != spec.n_bins) {
      throw DataError("spectrogram of '" + e.id + "' does not match the " +
                      std::string(task_name(task)) + " representation");
    }
    return s;
  };
  if (src.extension() == ".tksp") return check(read_spectrogram_cache(src.string()));
  if (!cache_dir.empty()) {
    const fs::path cached = cache_path(cache_dir, e);
    if (fs::exists(cached)) return check(read_spectrogram_cache(cached.string()));
  }
  return filtered_spectrogram(load_audio(src.string(), spec.sample_rate), spec);
}

// A track ready for training or evaluation: full-length raw spectrogram
// (40 x T for tempo, 192 x T for key) and its class index.
struct LabeledSample {
  std::string id;
  std::string dataset;
  Grid spectrogram;
  std::size_t target = 0;
};

inline std::vector<LabeledSample> load_samples(const std::string& manifest_path,
                                               const std::vector<ManifestEntry>& entries,
                                               Task task, const std::string& cache_dir = "") {
  std::vector<LabeledSample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    out.push_back({e.id, e.dataset,
                   entry_spectrogram(manifest_path, e, task, cache_dir).values, e.target});
  }
  return out;
}

}  // namespace tk
