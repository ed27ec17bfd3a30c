#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "tempokey/binary_io.hpp"
#include "tempokey/labels.hpp"
#include "tempokey/ops.hpp"

namespace tk {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Task { tempo, key };

inline std::string_view task_name(Task t) { return t == Task::tempo ? "tempo" : "key"; }

inline Task parse_task(std::string_view s) {
  if (s == "tempo") return Task::tempo;
  if (s == "key") return Task::key;
  throw RangeError("unknown task '" + std::string(s) + "'");
}

struct TaskConfig {
  Task task = Task::tempo;
  std::size_t n_classes = kTempoClasses;
  std::size_t input_bins = 40;
  std::size_t train_frames = 256;

  static TaskConfig tempo() { return {Task::tempo, kTempoClasses, 40, 256}; }
  static TaskConfig key() { return {Task::key, kKeyClasses, 168, 60}; }
  static TaskConfig for_task(Task t) { return t == Task::tempo ? tempo() : key(); }

  void validate() const {
    if (*this != for_task(task)) {
      throw ConfigMismatch("task config for " + std::string(task_name(task)) +
                           " must be classes/bins/frames = " +
                           (task == Task::tempo ? "256/40/256" : "24/168/60"));
    }
  }

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

enum class Family { shallow, deep };
enum class Direction { temporal, spectral, square };

// Filter-count exponent of each DeepMod position.
inline constexpr std::array<int, 6> kDeepModuleScale = {0, 1, 2, 2, 3, 3};

struct ArchConfig {
  Family family = Family::shallow;
  Direction direction = Direction::temporal;
  int k = 1;
  double dropout = 0.1;
  // Length of the shallow long filter; 0 selects the full training extent.
  std::size_t long_filter_len = 0;

  void validate() const {
    if (family == Family::shallow && direction == Direction::square) {
      throw RangeError("shallow architecture has no square variant");
    }
    if (k < 1) throw RangeError("filter scale k must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw RangeError("dropout must lie in [0, 1)");
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

// The five named networks.
inline constexpr std::array<std::string_view, 5> kArchNames = {
    "shallow-temp", "shallow-spec", "deep-temp", "deep-spec", "deep-square"};

inline ArchConfig parse_arch(std::string_view name, int k = 1, double dropout = 0.1) {
  if (name == "shallow-temp") return {Family::shallow, Direction::temporal, k, dropout, 0};
  if (name == "shallow-spec") return {Family::shallow, Direction::spectral, k, dropout, 0};
  if (name == "deep-temp") return {Family::deep, Direction::temporal, k, dropout, 0};
  if (name == "deep-spec") return {Family::deep, Direction::spectral, k, dropout, 0};
  if (name == "deep-square") return {Family::deep, Direction::square, k, dropout, 0};
  throw RangeError("unknown architecture '" + std::string(name) + "'");
}

inline std::string arch_name(const ArchConfig& a) {
  const char* dir = a.direction == Direction::temporal   ? "temp"
                    : a.direction == Direction::spectral ? "spec"
                                                         : "square";
  return std::string(a.family == Family::shallow ? "shallow-" : "deep-") + dir;
}

inline std::size_t resolved_long_filter(const TaskConfig& task, const ArchConfig& arch) {
  if (arch.long_filter_len) return arch.long_filter_len;
  return arch.direction == Direction::temporal ? task.train_frames : task.input_bins;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayer {
  Var<T> weights;  // [K, C, kh, kw]
  Var<T> bias;     // [K]
  Padding padding = Padding::same;
};

struct ReluLayer {};

struct DropoutLayer {
  double p = 0;
};

enum class Axis { frequency, time };

// Average over the full current extent of one axis.
struct AxisAvgPoolLayer {
  Axis axis = Axis::frequency;
};

struct MaxPoolLayer {
  std::size_t ph = 2;
  std::size_t pw = 2;
};

template <typename T>
struct BatchNormLayer {
  Var<T> gamma;
  Var<T> beta;
  BatchNormState<T> state;
};

struct GlobalAvgPoolLayer {};
struct SoftmaxLayer {};

template <typename T>
using Layer = std::variant<ConvLayer<T>, ReluLayer, DropoutLayer, AxisAvgPoolLayer,
                           MaxPoolLayer, BatchNormLayer<T>, GlobalAvgPoolLayer, SoftmaxLayer>;

template <typename T>
std::string layer_name(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> std::string {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, ConvLayer<T>>) {
          const auto& s = l.weights.shape();
          return "conv " + std::to_string(s[0]) + "x" + std::to_string(s[2]) + "x" +
                 std::to_string(s[3]);
        } else if constexpr (std::is_same_v<L, ReluLayer>) {
          return "relu";
        } else if constexpr (std::is_same_v<L, DropoutLayer>) {
          return "dropout";
        } else if constexpr (std::is_same_v<L, AxisAvgPoolLayer>) {
          return l.axis == Axis::frequency ? "avgpool freq" : "avgpool time";
        } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
          return "maxpool";
        } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
          return "batchnorm";
        } else if constexpr (std::is_same_v<L, GlobalAvgPoolLayer>) {
          return "globalavgpool";
        } else {
          return "softmax";
        }
      },
      layer);
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

template <typename T>
class ModelGraph {
 public:
  using Observer = std::function<void(const Layer<T>&, const Shape&)>;

  ModelGraph(TaskConfig task, ArchConfig arch, std::vector<Layer<T>> layers)
      : task_(task), arch_(arch), layers_(std::move(layers)) {}

  const TaskConfig& task() const { return task_; }
  const ArchConfig& arch() const { return arch_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  // Smallest accepted time extent.
  std::size_t min_frames() const {
    if (arch_.family == Family::deep) return 1;
    return arch_.direction == Direction::temporal ? resolved_long_filter(task_, arch_)
                                                  : task_.train_frames;
  }

  void check_input(const Shape& s) const {
    require_rank(s, 4, "model input");
    if (s[1] != 1) throw ShapeError("model input must have one channel");
    if (s[2] != task_.input_bins) {
      throw ShapeError("model expects " + std::to_string(task_.input_bins) +
                       " frequency bins, got " + std::to_string(s[2]));
    }
    if (s[3] < min_frames()) {
      throw ShapeError("model needs at least " + std::to_string(min_frames()) +
                       " frames, got " + std::to_string(s[3]));
    }
  }

  // input [N, 1, F, T] -> class distribution [N, n_classes]. Dropout draws
  // from rng in train mode only.
  Var<T> forward(const Var<T>& input, Mode mode, Rng& rng, const Observer& observe = {}) {
    check_input(input.shape());
    Var<T> x = input;
    for (auto& layer : layers_) {
      x = std::visit(
          [&](auto& l) -> Var<T> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, ConvLayer<T>>) {
              return conv2d(x, l.weights, l.bias, l.padding);
            } else if constexpr (std::is_same_v<L, ReluLayer>) {
              return relu(x);
            } else if constexpr (std::is_same_v<L, DropoutLayer>) {
              return dropout(x, l.p, mode, rng);
            } else if constexpr (std::is_same_v<L, AxisAvgPoolLayer>) {
              return l.axis == Axis::frequency ? pool2d(x, x.shape()[2], 1, PoolMode::avg)
                                               : pool2d(x, 1, x.shape()[3], PoolMode::avg);
            } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
              return pool2d(x, l.ph, l.pw, PoolMode::max);
            } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
              return batchnorm(x, l.gamma, l.beta, l.state, mode);
            } else if constexpr (std::is_same_v<L, GlobalAvgPoolLayer>) {
              return global_avg_pool(x);
            } else {
              return softmax(x);
            }
          },
          layer);
      if (observe) observe(layer, x.shape());
    }
    return x;
  }

  // Eval-mode forward on a plain tensor.
  Tensor<T> predict(const Tensor<T>& input) {
    Rng unused(0);
    return forward(Var<T>(input), Mode::eval, unused).value();
  }

  // Trainable parameters in layer order.
  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (const auto& layer : layers_) {
      if (const auto* c = std::get_if<ConvLayer<T>>(&layer)) {
        out.push_back(c->weights);
        out.push_back(c->bias);
      } else if (const auto* b = std::get_if<BatchNormLayer<T>>(&layer)) {
        out.push_back(b->gamma);
        out.push_back(b->beta);
      }
    }
    return out;
  }

  // Every stored tensor (trainable + batchnorm moving statistics), in the
  // serialization order.
  std::vector<Tensor<T>*> state_tensors() {
    std::vector<Tensor<T>*> out;
    for (auto& layer : layers_) {
      if (auto* c = std::get_if<ConvLayer<T>>(&layer)) {
        out.push_back(&c->weights.value());
        out.push_back(&c->bias.value());
      } else if (auto* b = std::get_if<BatchNormLayer<T>>(&layer)) {
        out.push_back(&b->gamma.value());
        out.push_back(&b->beta.value());
        out.push_back(&b->state.running_mean);
        out.push_back(&b->state.running_var);
      }
    }
    return out;
  }

  std::vector<Tensor<T>> snapshot() {
    std::vector<Tensor<T>> out;
    for (auto* t : state_tensors()) out.push_back(*t);
    return out;
  }

  void restore(const std::vector<Tensor<T>>& saved) {
    auto targets = state_tensors();
    if (targets.size() != saved.size()) throw ShapeError("restore: tensor count mismatch");
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (targets[i]->shape() != saved[i].shape()) throw ShapeError("restore: shape mismatch");
      *targets[i] = saved[i];
    }
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

 private:
  TaskConfig task_;
  ArchConfig arch_;
  std::vector<Layer<T>> layers_;
  Mode mode_ = Mode::eval;
};

// Conv weights, biases, batchnorm gamma/beta and both moving statistics.
template <typename T>
std::size_t count_parameters(const ModelGraph<T>& model) {
  std::size_t total = 0;
  for (const auto& layer : model.layers()) {
    if (const auto* c = std::get_if<ConvLayer<T>>(&layer)) {
      total += c->weights.value().size() + c->bias.value().size();
    } else if (const auto* b = std::get_if<BatchNormLayer<T>>(&layer)) {
      total += 4 * b->gamma.value().size();
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
ConvLayer<T> glorot_conv(std::size_t filters, std::size_t channels, std::size_t kh,
                         std::size_t kw, Padding padding, Rng& rng) {
  const double fan_in = static_cast<double>(channels * kh * kw);
  const double fan_out = static_cast<double>(filters * kh * kw);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Tensor<T> w({filters, channels, kh, kw});
  for (auto& v : w.data()) v = static_cast<T>(uniform(rng));
  return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>({filters})), padding};
}

template <typename T>
BatchNormLayer<T> make_batchnorm(std::size_t channels) {
  return {Var<T>::parameter(Tensor<T>({channels}, T(1))),
          Var<T>::parameter(Tensor<T>({channels}, T(0))), BatchNormState<T>(channels)};
}

template <typename T>
void append_class_module(std::vector<Layer<T>>& layers, std::size_t channels,
                         std::size_t classes, Rng& rng) {
  layers.emplace_back(glorot_conv<T>(classes, channels, 1, 1, Padding::same, rng));
  layers.emplace_back(ReluLayer{});
  layers.emplace_back(GlobalAvgPoolLayer{});
  layers.emplace_back(SoftmaxLayer{});
}

}  // namespace detail

// Short directional conv, orthogonal full-extent average pool, long
// directional conv (valid), then the classification module.
template <typename T = float>
ModelGraph<T> build_shallow(const TaskConfig& task, Direction direction, int k, double p_dropout,
                            std::uint64_t seed = 0, std::size_t long_filter_len = 0) {
  task.validate();
  const ArchConfig arch{Family::shallow, direction, k, p_dropout, long_filter_len};
  arch.validate();
  const std::size_t len = resolved_long_filter(task, arch);
  const bool temporal = direction == Direction::temporal;
  if (len == 0 || len > (temporal ? task.train_frames : task.input_bins)) {
    throw RangeError("long filter length must lie in [1, training extent]");
  }
  const auto short_filters = static_cast<std::size_t>(k);
  const std::size_t long_filters = 64 * short_filters;

  Rng rng(seed);
  std::vector<Layer<T>> layers;
  layers.emplace_back(detail::glorot_conv<T>(short_filters, 1, temporal ? 1 : 3,
                                             temporal ? 3 : 1, Padding::same, rng));
  layers.emplace_back(ReluLayer{});
  layers.emplace_back(DropoutLayer{p_dropout});
  layers.emplace_back(AxisAvgPoolLayer{temporal ? Axis::frequency : Axis::time});
  layers.emplace_back(detail::glorot_conv<T>(long_filters, short_filters, temporal ? 1 : len,
                                             temporal ? len : 1, Padding::valid, rng));
  layers.emplace_back(ReluLayer{});
  layers.emplace_back(DropoutLayer{p_dropout});
  detail::append_class_module(layers, long_filters, task.n_classes, rng);
  return ModelGraph<T>(task, arch, std::move(layers));
}

// Six DeepMods with 2^l * k filters, l = (0, 1, 2, 2, 3, 3), then the
// classification module.
template <typename T = float>
ModelGraph<T> build_deep(const TaskConfig& task, Direction direction, int k, double p_dropout,
                         std::uint64_t seed = 0) {
  task.validate();
  const ArchConfig arch{Family::deep, direction, k, p_dropout, 0};
  arch.validate();
  auto kernel = [direction](std::size_t n) -> std::pair<std::size_t, std::size_t> {
    switch (direction) {
      case Direction::temporal: return {1, n};
      case Direction::spectral: return {n, 1};
      default: return {n, n};
    }
  };

  Rng rng(seed);
  std::vector<Layer<T>> layers;
  std::size_t channels = 1;
  for (int scale : kDeepModuleScale) {
    const std::size_t filters = (std::size_t{1} << scale) * static_cast<std::size_t>(k);
    const auto [h5, w5] = kernel(5);
    const auto [h3, w3] = kernel(3);
    layers.emplace_back(detail::glorot_conv<T>(filters, channels, h5, w5, Padding::same, rng));
    layers.emplace_back(ReluLayer{});
    layers.emplace_back(detail::make_batchnorm<T>(filters));
    layers.emplace_back(detail::glorot_conv<T>(filters, filters, h3, w3, Padding::same, rng));
    layers.emplace_back(ReluLayer{});
    layers.emplace_back(detail::make_batchnorm<T>(filters));
    layers.emplace_back(MaxPoolLayer{2, 2});
    layers.emplace_back(DropoutLayer{p_dropout});
    channels = filters;
  }
  detail::append_class_module(layers, channels, task.n_classes, rng);
  return ModelGraph<T>(task, arch, std::move(layers));
}

template <typename T = float>
ModelGraph<T> build_model(const TaskConfig& task, const ArchConfig& arch, std::uint64_t seed = 0) {
  if (arch.family == Family::shallow) {
    return build_shallow<T>(task, arch.direction, arch.k, arch.dropout, seed,
                            arch.long_filter_len);
  }
  return build_deep<T>(task, arch.direction, arch.k, arch.dropout, seed);
}

// Same architecture and weights in another precision.
template <typename U, typename T>
ModelGraph<U> convert_model(ModelGraph<T>& model) {
  ModelGraph<U> out = build_model<U>(model.task(), model.arch(), 0);
  auto src = model.state_tensors();
  auto dst = out.state_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Weight files ("TKWT")
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kWeightsVersion = 1;

// Canonical key=value encoding of both configs, one per line, sorted keys.
inline std::string encode_config(const TaskConfig& task, const ArchConfig& arch) {
  std::ostringstream oss;
  oss << std::setprecision(std::numeric_limits<double>::max_digits10);
  oss << "direction="
      << (arch.direction == Direction::temporal   ? "temporal"
          : arch.direction == Direction::spectral ? "spectral"
                                                  : "square")
      << '\n';
  oss << "dropout=" << arch.dropout << '\n';
  oss << "family=" << (arch.family == Family::shallow ? "shallow" : "deep") << '\n';
  oss << "input_bins=" << task.input_bins << '\n';
  oss << "k=" << arch.k << '\n';
  oss << "long_filter_len=" << arch.long_filter_len << '\n';
  oss << "n_classes=" << task.n_classes << '\n';
  oss << "task=" << task_name(task.task) << '\n';
  oss << "train_frames=" << task.train_frames << '\n';
  return oss.str();
}

inline std::pair<TaskConfig, ArchConfig> decode_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("weights: malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError(std::string("weights: config lacks '") + key + "'");
    return it->second;
  };
  try {
    TaskConfig task;
    task.task = parse_task(get("task"));
    task.n_classes = std::stoul(get("n_classes"));
    task.input_bins = std::stoul(get("input_bins"));
    task.train_frames = std::stoul(get("train_frames"));
    ArchConfig arch;
    const auto& family = get("family");
    if (family != "shallow" && family != "deep") throw DataError("weights: unknown family");
    arch.family = family == "shallow" ? Family::shallow : Family::deep;
    const auto& dir = get("direction");
    if (dir != "temporal" && dir != "spectral" && dir != "square") {
      throw DataError("weights: unknown direction");
    }
    arch.direction = dir == "temporal"   ? Direction::temporal
                     : dir == "spectral" ? Direction::spectral
                                         : Direction::square;
    arch.k = std::stoi(get("k"));
    arch.dropout = std::stod(get("dropout"));
    arch.long_filter_len = std::stoul(get("long_filter_len"));
    task.validate();
    arch.validate();
    return {task, arch};
  } catch (const std::logic_error&) {
    throw DataError("weights: malformed config values");
  }
}

template <typename T>
std::vector<char> encode_weights(ModelGraph<T>& model) {
  io::ByteWriter w;
  w.bytes("TKWT");
  w.le<std::uint16_t>(kWeightsVersion);
  const std::string config = encode_config(model.task(), model.arch());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.bytes(config);
  const auto tensors = model.state_tensors();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto* t : tensors) {
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t->rank()));
    for (std::size_t d : t->shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (T v : t->data()) w.f32(static_cast<float>(v));
  }
  const std::uint32_t crc = io::crc32_of(w.buffer().data(), w.buffer().size());
  w.le<std::uint32_t>(crc);
  return std::move(w.buffer());
}

template <typename T>
void save_weights(ModelGraph<T>& model, const std::string& path) {
  io::write_file(path, encode_weights(model));
}

namespace detail {

struct WeightBlob {
  TaskConfig task;
  ArchConfig arch;
  std::vector<Tensor<float>> tensors;
};

inline WeightBlob decode_weights(const std::vector<char>& bytes) {
  if (bytes.size() < 4 + 2 + 4 + 4 + 4) throw ChecksumError("weights: file too short");
  const std::size_t body = bytes.size() - 4;
  io::ByteReader tail(bytes.data() + body, 4);
  if (tail.le<std::uint32_t>() != io::crc32_of(bytes.data(), body)) {
    throw ChecksumError("weights: checksum mismatch");
  }
  io::ByteReader in(bytes.data(), body);
  if (in.bytes(4) != "TKWT") throw DataError("weights: bad magic");
  const auto version = in.le<std::uint16_t>();
  if (version != kWeightsVersion) {
    throw DataError("weights: unsupported version " + std::to_string(version));
  }
  WeightBlob blob;
  const auto config_len = in.le<std::uint32_t>();
  const auto [task, arch] = decode_config(in.bytes(config_len));
  blob.task = task;
  blob.arch = arch;
  const auto count = in.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Shape shape(in.le<std::uint8_t>());
    for (auto& d : shape) d = in.le<std::uint32_t>();
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = in.f32();
    blob.tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw DataError("weights: trailing bytes");
  return blob;
}

template <typename T>
void fill_from_blob(ModelGraph<T>& model, const WeightBlob& blob) {
  auto targets = model.state_tensors();
  if (targets.size() != blob.tensors.size()) {
    throw ConfigMismatch("weights: tensor count does not match architecture");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i]->shape() != blob.tensors[i].shape()) {
      throw ConfigMismatch("weights: tensor " + std::to_string(i) + " has shape " +
                           shape_str(blob.tensors[i].shape()) + ", expected " +
                           shape_str(targets[i]->shape()));
    }
    *targets[i] = blob.tensors[i].template cast<T>();
  }
}

}  // namespace detail

// Rebuilds the architecture recorded in the file and fills its tensors.
template <typename T = float>
ModelGraph<T> load_weights(const std::string& path) {
  const auto blob = detail::decode_weights(io::read_file(path));
  ModelGraph<T> model = build_model<T>(blob.task, blob.arch, 0);
  detail::fill_from_blob(model, blob);
  return model;
}

// Loads into an existing model; the recorded configs must match it exactly.
template <typename T>
void load_weights_into(ModelGraph<T>& model, const std::string& path) {
  const auto blob = detail::decode_weights(io::read_file(path));
  if (blob.task != model.task() || blob.arch != model.arch()) {
    throw ConfigMismatch("weights: file describes " + arch_name(blob.arch) + "/" +
                         std::string(task_name(blob.task.task)) + ", model is " +
                         arch_name(model.arch()) + "/" +
                         std::string(task_name(model.task().task)));
  }
  detail::fill_from_blob(model, blob);
}

}  // namespace tk
