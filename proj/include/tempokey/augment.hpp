#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>

#include "tempokey/dsp.hpp"
#include "tempokey/labels.hpp"
#include "tempokey/ops.hpp"

namespace tk {

struct CropWindow {
  std::size_t time_offset = 0;
  std::size_t width = 0;
  std::size_t freq_offset = 0;
  std::size_t height = 0;
};

inline Grid crop(const Grid& src, const CropWindow& w) {
  if (w.freq_offset + w.height > src.rows || w.time_offset + w.width > src.cols) {
    throw ShapeError("crop: window exceeds " + std::to_string(src.rows) + "x" +
                     std::to_string(src.cols) + " grid");
  }
  Grid out(w.height, w.width);
  for (std::size_t r = 0; r < w.height; ++r) {
    const float* in = &src.values[(w.freq_offset + r) * src.cols + w.time_offset];
    std::copy(in, in + w.width, &out.values[r * w.width]);
  }
  return out;
}

inline Grid time_crop(const Grid& src, std::size_t offset, std::size_t width) {
  return crop(src, {offset, width, 0, src.rows});
}

inline void require_width(const Grid& src, std::size_t width) {
  if (src.cols < width) {
    throw ShapeError("crop: source has " + std::to_string(src.cols) +
                     " frames, need at least " + std::to_string(width));
  }
}

// Full-height slice of `width` frames at an offset uniform over [0, T - width].
inline Grid random_time_crop(const Grid& src, std::size_t width, Rng& rng) {
  require_width(src, width);
  std::uniform_int_distribution<std::size_t> offset(0, src.cols - width);
  return time_crop(src, offset(rng), width);
}

// Deterministic crop at floor((T - width) / 2).
inline Grid center_time_crop(const Grid& src, std::size_t width) {
  require_width(src, width);
  return time_crop(src, (src.cols - width) / 2, width);
}

inline constexpr std::size_t kPitchShiftSourceBins = 192;
inline constexpr std::size_t kPitchShiftOutputBins = 168;
// Bin offset of E1 above C1 (4 semitones, 2 bins each): the unshifted window.
inline constexpr std::size_t kUnshiftedKeyOffset = 8;

// Rows [8 + 2s, 8 + 2s + 168) of an 8-octave grid starting at C1. Pair with
// shift_key_label(label, s).
inline Grid pitch_shift_crop(const Grid& src, int s) {
  if (s < kMinKeyShift || s > kMaxKeyShift) {
    throw RangeError("pitch shift " + std::to_string(s) + " outside [-4, 7]");
  }
  if (src.rows != kPitchShiftSourceBins) {
    throw ShapeError("pitch_shift_crop: expected 192 bins, got " + std::to_string(src.rows));
  }
  const auto start = static_cast<std::size_t>(static_cast<int>(kUnshiftedKeyOffset) + 2 * s);
  return crop(src, {0, src.cols, start, kPitchShiftOutputBins});
}

// Resamples each row of the time axis to round(s * T) frames by linear
// interpolation; output frame t reads source position t / s.
inline Grid time_scale(const Grid& src, double s, std::size_t min_width = 0) {
  if (!is_time_scale_factor(s)) {
    throw RangeError("time-scale factor " + std::to_string(s) + " not in {0.8, 0.84, ..., 1.2}");
  }
  if (src.cols == 0) throw ShapeError("time_scale: empty grid");
  const auto out_cols = static_cast<std::size_t>(std::lround(s * static_cast<double>(src.cols)));
  if (out_cols < std::max<std::size_t>(min_width, 1)) {
    throw ShapeError("time_scale: " + std::to_string(out_cols) +
                     " frames after scaling, need " + std::to_string(min_width));
  }
  if (std::abs(s - 1.0) < 1e-12) return src;
  Grid out(src.rows, out_cols);
  const std::size_t last = src.cols - 1;
  for (std::size_t t = 0; t < out_cols; ++t) {
    const double pos = std::min(static_cast<double>(t) / s, static_cast<double>(last));
    const auto t0 = static_cast<std::size_t>(pos);
    const std::size_t t1 = std::min(t0 + 1, last);
    const auto frac = static_cast<float>(pos - static_cast<double>(t0));
    for (std::size_t r = 0; r < src.rows; ++r) {
      out(r, t) = (1.0f - frac) * src(r, t0) + frac * src(r, t1);
    }
  }
  return out;
}

inline int draw_key_shift(Rng& rng) {
  return std::uniform_int_distribution<int>(kMinKeyShift, kMaxKeyShift)(rng);
}

inline double draw_time_scale(Rng& rng) {
  return kTimeScaleFactors[std::uniform_int_distribution<std::size_t>(
      0, kTimeScaleFactors.size() - 1)(rng)];
}

}  // namespace tk
