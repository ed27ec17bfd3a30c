#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "tempokey/binary_io.hpp"
#include "tempokey/error.hpp"

namespace tk {

// ---------------------------------------------------------------------------
// Audio
// ---------------------------------------------------------------------------

struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = 0;

  double duration() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

inline void validate(const AudioBuffer& audio) {
  if (audio.sample_rate <= 0) throw DataError("audio: sample rate must be positive");
  for (float s : audio.samples)
    if (!std::isfinite(s)) throw DataError("audio: non-finite sample");
}

// Linear-interpolation resampler. Output length is round(n * target / source).
inline AudioBuffer resample_linear(const AudioBuffer& audio, int target_rate) {
  if (target_rate <= 0) throw RangeError("resample: target rate must be positive");
  if (audio.sample_rate == target_rate || audio.samples.empty()) {
    AudioBuffer out = audio;
    out.sample_rate = target_rate;
    return out;
  }
  const double step = static_cast<double>(audio.sample_rate) / target_rate;
  const auto n_out = static_cast<std::size_t>(std::llround(
      static_cast<double>(audio.samples.size()) * target_rate / audio.sample_rate));
  AudioBuffer out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  const std::size_t last = audio.samples.size() - 1;
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto i0 = std::min(static_cast<std::size_t>(pos), last);
    const std::size_t i1 = std::min(i0 + 1, last);
    const double frac = pos - static_cast<double>(i0);
    out.samples[i] = static_cast<float>((1.0 - frac) * audio.samples[i0] +
                                        frac * audio.samples[i1]);
  }
  return out;
}

namespace detail {

inline float decode_pcm(const unsigned char* p, int bits, bool is_float) {
  if (is_float) {
    std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                      (static_cast<std::uint32_t>(p[2]) << 16) |
                      (static_cast<std::uint32_t>(p[3]) << 24);
    return std::clamp(std::bit_cast<float>(u), -1.0f, 1.0f);
  }
  switch (bits) {
    case 8:
      return (static_cast<float>(p[0]) - 128.0f) / 128.0f;
    case 16: {
      const auto v = static_cast<std::int16_t>(p[0] | (p[1] << 8));
      return static_cast<float>(v) / 32768.0f;
    }
    case 24: {
      std::int32_t v = p[0] | (p[1] << 8) | (p[2] << 16);
      if (v & 0x800000) v -= 0x1000000;
      return static_cast<float>(v) / 8388608.0f;
    }
    case 32: {
      const auto v = static_cast<std::int32_t>(
          static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24));
      return static_cast<float>(static_cast<double>(v) / 2147483648.0);
    }
    default:
      throw DataError("wav: unsupported bit depth " + std::to_string(bits));
  }
}

}  // namespace detail

// Decodes a RIFF/WAVE file (PCM 8/16/24/32-bit integer or 32-bit float) and
// averages all channels to mono. No resampling.
inline AudioBuffer read_wav(const std::string& path) {
  const std::vector<char> bytes = io::read_file(path);
  io::ByteReader in(bytes.data(), bytes.size());
  try {
    if (in.bytes(4) != "RIFF") throw DataError("not a RIFF file");
    in.le<std::uint32_t>();
    if (in.bytes(4) != "WAVE") throw DataError("not a WAVE file");
  } catch (const DataError& e) {
    throw DataError("wav " + path + ": " + e.what());
  }

  int format = 0, channels = 0, rate = 0, bits = 0;
  bool have_fmt = false;
  std::string payload;
  while (in.remaining() >= 8) {
    const std::string id = in.bytes(4);
    const auto size = in.le<std::uint32_t>();
    if (size > in.remaining()) throw DataError("wav " + path + ": truncated chunk " + id);
    if (id == "fmt ") {
      io::ByteReader fmt(bytes.data() + in.position(), size);
      format = fmt.le<std::uint16_t>();
      channels = fmt.le<std::uint16_t>();
      rate = static_cast<int>(fmt.le<std::uint32_t>());
      fmt.le<std::uint32_t>();
      fmt.le<std::uint16_t>();
      bits = fmt.le<std::uint16_t>();
      if (format == 0xFFFE && size >= 26) {  // WAVE_FORMAT_EXTENSIBLE
        fmt.le<std::uint16_t>();
        fmt.le<std::uint16_t>();
        fmt.le<std::uint32_t>();
        format = fmt.le<std::uint16_t>();
      }
      have_fmt = true;
    } else if (id == "data") {
      payload.assign(bytes.data() + in.position(), size);
    }
    in.bytes(size + (size & 1u) <= in.remaining() ? size + (size & 1u) : size);
  }

  if (!have_fmt) throw DataError("wav " + path + ": missing fmt chunk");
  const bool is_float = format == 3;
  if (format != 1 && !is_float) {
    throw DataError("wav " + path + ": unsupported encoding " + std::to_string(format));
  }
  if (is_float && bits != 32) throw DataError("wav " + path + ": only 32-bit float supported");
  if (!is_float && bits != 8 && bits != 16 && bits != 24 && bits != 32) {
    throw DataError("wav " + path + ": unsupported bit depth " + std::to_string(bits));
  }
  if (channels <= 0 || rate <= 0) throw DataError("wav " + path + ": invalid fmt chunk");
  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * (bits / 8);
  const std::size_t frames = payload.size() / frame_bytes;
  if (frames == 0) throw DataError("wav " + path + ": zero-length audio");

  AudioBuffer audio;
  audio.sample_rate = rate;
  audio.samples.resize(frames);
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0;
    for (int c = 0; c < channels; ++c) {
      acc += detail::decode_pcm(p + f * frame_bytes + c * (bits / 8), bits, is_float);
    }
    audio.samples[f] = static_cast<float>(acc / channels);
  }
  return audio;
}

// Writes 16-bit PCM WAV with the given channel count (samples interleaved).
inline void write_wav(const std::string& path, std::span<const float> interleaved,
                      int sample_rate, int channels = 1) {
  io::ByteWriter w;
  const auto data_size = static_cast<std::uint32_t>(interleaved.size() * 2);
  w.bytes("RIFF");
  w.le<std::uint32_t>(36 + data_size);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.le<std::uint32_t>(16);
  w.le<std::uint16_t>(1);
  w.le<std::uint16_t>(static_cast<std::uint16_t>(channels));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(sample_rate));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(sample_rate * channels * 2));
  w.le<std::uint16_t>(static_cast<std::uint16_t>(channels * 2));
  w.le<std::uint16_t>(16);
  w.bytes("data");
  w.le<std::uint32_t>(data_size);
  for (float s : interleaved) {
    const auto v = static_cast<std::int16_t>(
        std::lround(std::clamp(s, -1.0f, 1.0f) * 32767.0f));
    w.le<std::int16_t>(v);
  }
  io::write_file(path, w.buffer());
}

inline void write_wav(const std::string& path, const AudioBuffer& audio) {
  write_wav(path, audio.samples, audio.sample_rate, 1);
}

// Reads a WAV file, mixes to mono and resamples to target_rate.
inline AudioBuffer load_audio(const std::string& path, int target_rate) {
  AudioBuffer audio = read_wav(path);
  validate(audio);
  return resample_linear(audio, target_rate);
}

// ---------------------------------------------------------------------------
// Spectrograms
// ---------------------------------------------------------------------------

// Row-major frequency x time grid.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, float fill = 0.0f)
      : rows(r), cols(c), values(r * c, fill) {}

  float& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

enum class SpectrogramKind : std::uint8_t { linear = 0, mel = 1, logfreq = 2 };

struct SpectrogramSpec {
  SpectrogramKind kind = SpectrogramKind::linear;
  std::size_t n_bins = 0;
  double fmin = 0;
  double fmax = 0;
  std::size_t window_size = 0;
  std::size_t hop_size = 0;
  int sample_rate = 0;

  double frame_duration() const {
    return static_cast<double>(hop_size) / sample_rate;
  }

  void validate() const {
    if (sample_rate <= 0) throw RangeError("spectrogram: sample rate must be positive");
    if (!(fmin < fmax) || fmax > sample_rate / 2.0 + 1e-9) {
      throw RangeError("spectrogram: need fmin < fmax <= sample_rate / 2");
    }
    if (hop_size == 0 || hop_size > window_size) {
      throw RangeError("spectrogram: need 0 < hop_size <= window_size");
    }
    if (kind == SpectrogramKind::logfreq && n_bins % 24 != 0) {
      throw RangeError("spectrogram: log-frequency bin count must be a multiple of 24");
    }
  }
};

struct Spectrogram {
  Grid values;  // n_bins x frames
  SpectrogramSpec spec;
  double frame_duration = 0;

  std::size_t bins() const { return values.rows; }
  std::size_t frames() const { return values.cols; }
};

// Lowest bin of the key representation: C1.
inline constexpr double kC1Hz = 32.70319566257483;
inline constexpr std::size_t kBinsPerOctave = 24;

inline SpectrogramSpec tempo_spectrogram_spec() {
  return {SpectrogramKind::mel, 40, 20.0, 5000.0, 1024, 512, 11025};
}

// 8 octaves from C1; the top edge is one bin above the last center.
inline SpectrogramSpec key_spectrogram_spec() {
  return {SpectrogramKind::logfreq, 192, kC1Hz,
          kC1Hz * std::pow(2.0, 192.0 / kBinsPerOctave), 8192, 4096, 22050};
}

// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                static_cast<double>(n));
  }
  return w;
}

inline std::size_t frame_count(std::size_t length, std::size_t window, std::size_t hop) {
  if (length < window) return 0;
  return (length - window) / hop + 1;
}

// valid: frames lie inside the signal, floor((len - window) / hop) + 1 of them.
// centered: the signal is zero-padded by window/2 on both sides first, so
// frame t is centered on sample t * hop and there are floor(len / hop) + 1.
enum class Framing { valid, centered };

inline Spectrogram stft_magnitude(const AudioBuffer& audio, std::size_t window_size,
                                  std::size_t hop_size, Framing framing = Framing::valid) {
  if (window_size == 0 || hop_size == 0) throw RangeError("stft: window and hop must be positive");
  if (audio.samples.size() < window_size) {
    throw DataError("stft: audio of " + std::to_string(audio.samples.size()) +
                    " samples is shorter than one window of " + std::to_string(window_size));
  }
  std::vector<float> padded;
  std::span<const float> signal = audio.samples;
  if (framing == Framing::centered) {
    padded.assign(audio.samples.size() + 2 * (window_size / 2), 0.0f);
    std::copy(audio.samples.begin(), audio.samples.end(), padded.begin() + window_size / 2);
    signal = padded;
  }
  const std::size_t n_frames = frame_count(signal.size(), window_size, hop_size);
  const std::size_t n_bins = window_size / 2 + 1;
  const std::vector<double> window = hann_window(window_size);

  Spectrogram out;
  out.spec = {SpectrogramKind::linear, n_bins, 0.0, audio.sample_rate / 2.0,
              window_size, hop_size, audio.sample_rate};
  out.frame_duration = out.spec.frame_duration();
  out.values = Grid(n_bins, n_frames);

  Eigen::FFT<double> fft;
  std::vector<double> frame(window_size);
  std::vector<std::complex<double>> bins;
  for (std::size_t t = 0; t < n_frames; ++t) {
    const float* src = signal.data() + t * hop_size;
    for (std::size_t i = 0; i < window_size; ++i) frame[i] = src[i] * window[i];
    fft.fwd(bins, frame);
    for (std::size_t b = 0; b < n_bins; ++b) {
      out.values(b, t) = static_cast<float>(std::abs(bins[b]));
    }
  }
  return out;
}

// Sparse triangular filters over the bins of a linear-frequency STFT.
struct FilterBank {
  struct Tap {
    std::size_t bin;
    float weight;
  };
  std::size_t input_bins = 0;
  std::vector<double> centers;  // Hz, one per filter
  std::vector<std::vector<Tap>> filters;

  std::size_t size() const { return filters.size(); }

  Grid apply(const Grid& linear) const {
    if (linear.rows != input_bins) {
      throw ShapeError("filterbank: expected " + std::to_string(input_bins) +
                       " input bins, got " + std::to_string(linear.rows));
    }
    Grid out(filters.size(), linear.cols);
    for (std::size_t f = 0; f < filters.size(); ++f) {
      float* row = &out.values[f * linear.cols];
      for (const Tap& tap : filters[f]) {
        const float* in = &linear.values[tap.bin * linear.cols];
        for (std::size_t t = 0; t < linear.cols; ++t) row[t] += tap.weight * in[t];
      }
    }
    return out;
  }
};

namespace detail {

// Triangle rising from lo to a peak of 1 at center and falling to 0 at hi.
inline double triangle(double f, double lo, double center, double hi) {
  if (f <= lo || f >= hi) return 0.0;
  return f <= center ? (f - lo) / (center - lo) : (hi - f) / (hi - center);
}

inline FilterBank triangular_bank(const std::vector<double>& edges, int sample_rate,
                                  std::size_t window_size) {
  FilterBank bank;
  bank.input_bins = window_size / 2 + 1;
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(window_size);
  for (std::size_t m = 1; m + 1 < edges.size(); ++m) {
    const double lo = edges[m - 1], center = edges[m], hi = edges[m + 1];
    std::vector<FilterBank::Tap> taps;
    const auto first = static_cast<std::size_t>(std::max(0.0, std::floor(lo / bin_hz)));
    const auto last = std::min(bank.input_bins - 1,
                               static_cast<std::size_t>(std::ceil(hi / bin_hz)));
    for (std::size_t b = first; b <= last; ++b) {
      const double w = triangle(static_cast<double>(b) * bin_hz, lo, center, hi);
      if (w > 0) taps.push_back({b, static_cast<float>(w)});
    }
    // Narrower than one STFT bin: fall back to the nearest bin.
    if (taps.empty()) {
      const auto nearest = std::min(bank.input_bins - 1,
                                    static_cast<std::size_t>(std::lround(center / bin_hz)));
      taps.push_back({nearest, 1.0f});
    }
    bank.centers.push_back(center);
    bank.filters.push_back(std::move(taps));
  }
  return bank;
}

}  // namespace detail

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// n_filters triangles equally spaced on the (HTK) mel scale between fmin and fmax.
inline FilterBank mel_filterbank(std::size_t n_filters, double fmin, double fmax,
                                 int sample_rate, std::size_t window_size) {
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> edges(n_filters + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) /
                                  static_cast<double>(n_filters + 1));
  }
  return detail::triangular_bank(edges, sample_rate, window_size);
}

// Geometric centers fmin * 2^(b / bins_per_octave), each triangle spanning its
// two neighbouring centers.
inline FilterBank logfreq_filterbank(std::size_t n_bins, double fmin,
                                     std::size_t bins_per_octave, int sample_rate,
                                     std::size_t window_size) {
  std::vector<double> edges(n_bins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = fmin * std::pow(2.0, (static_cast<double>(i) - 1.0) /
                                        static_cast<double>(bins_per_octave));
  }
  return detail::triangular_bank(edges, sample_rate, window_size);
}

inline FilterBank filterbank_for(const SpectrogramSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case SpectrogramKind::mel:
      return mel_filterbank(spec.n_bins, spec.fmin, spec.fmax, spec.sample_rate,
                            spec.window_size);
    case SpectrogramKind::logfreq:
      return logfreq_filterbank(spec.n_bins, spec.fmin, kBinsPerOctave, spec.sample_rate,
                                spec.window_size);
    default:
      throw RangeError("filterbank: linear spectrograms have no filterbank");
  }
}

// Resamples to spec.sample_rate, runs a centered STFT and applies the filterbank.
inline Spectrogram filtered_spectrogram(const AudioBuffer& audio, const SpectrogramSpec& spec) {
  const FilterBank bank = filterbank_for(spec);
  const AudioBuffer resampled =
      audio.sample_rate == spec.sample_rate ? audio : resample_linear(audio, spec.sample_rate);
  const Spectrogram linear = stft_magnitude(resampled, spec.window_size, spec.hop_size, Framing::centered);
  Spectrogram out;
  out.values = bank.apply(linear.values);
  out.spec = spec;
  out.frame_duration = spec.frame_duration();
  return out;
}

// 40 mel bands, 20-5000 Hz, 11025 Hz / 1024 / 512.
inline Spectrogram mel_spectrogram(const AudioBuffer& audio) {
  return filtered_spectrogram(audio, tempo_spectrogram_spec());
}

// 192 log-frequency bins from C1, 2 per semitone, 22050 Hz / 8192 / 4096.
inline Spectrogram logfreq_spectrogram(const AudioBuffer& audio) {
  return filtered_spectrogram(audio, key_spectrogram_spec());
}

inline constexpr double kNormalizeEpsilon = 1e-8;

// Zero mean, unit variance over the whole grid; divisor sqrt(var) + epsilon.
inline void normalize_in_place(std::span<float> values, double epsilon = kNormalizeEpsilon) {
  if (values.empty()) throw ShapeError("normalize: empty grid");
  double mean = 0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0;
  for (float v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  const double scale = 1.0 / (std::sqrt(var) + epsilon);
  for (float& v : values) v = static_cast<float>((v - mean) * scale);
}

inline Grid normalize_sample(const Grid& grid, double epsilon = kNormalizeEpsilon) {
  Grid out = grid;
  normalize_in_place(out.values, epsilon);
  return out;
}

// ---------------------------------------------------------------------------
// Spectrogram cache ("TKSP")
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCacheVersion = 1;

inline std::vector<char> encode_spectrogram(const Spectrogram& s) {
  io::ByteWriter w;
  w.bytes("TKSP");
  w.le<std::uint16_t>(kCacheVersion);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(s.spec.kind));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(s.values.rows));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(s.values.cols));
  w.f64(s.frame_duration);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(s.spec.sample_rate));
  for (float v : s.values.values) w.f32(v);
  return std::move(w.buffer());
}

inline Spectrogram decode_spectrogram(const std::vector<char>& bytes) {
  io::ByteReader in(bytes.data(), bytes.size());
  if (in.bytes(4) != "TKSP") throw DataError("spectrogram cache: bad magic");
  const auto version = in.le<std::uint16_t>();
  if (version != kCacheVersion) {
    throw DataError("spectrogram cache: unsupported version " + std::to_string(version));
  }
  const auto kind = in.le<std::uint8_t>();
  if (kind > 2) throw DataError("spectrogram cache: unknown kind");
  const auto rows = in.le<std::uint32_t>();
  const auto cols = in.le<std::uint32_t>();
  Spectrogram s;
  s.frame_duration = in.f64();
  const auto rate = in.le<std::uint32_t>();
  if (in.remaining() != static_cast<std::size_t>(rows) * cols * 4) {
    throw DataError("spectrogram cache: payload size does not match header");
  }
  switch (static_cast<SpectrogramKind>(kind)) {
    case SpectrogramKind::mel: s.spec = tempo_spectrogram_spec(); break;
    case SpectrogramKind::logfreq: s.spec = key_spectrogram_spec(); break;
    default: s.spec = {}; break;
  }
  s.spec.kind = static_cast<SpectrogramKind>(kind);
  s.spec.n_bins = rows;
  s.spec.sample_rate = static_cast<int>(rate);
  s.values = Grid(rows, cols);
  for (float& v : s.values.values) v = in.f32();
  return s;
}

inline void write_spectrogram_cache(const std::string& path, const Spectrogram& s) {
  io::write_file(path, encode_spectrogram(s));
}

inline Spectrogram read_spectrogram_cache(const std::string& path) {
  try {
    return decode_spectrogram(io::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace tk
