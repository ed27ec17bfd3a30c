#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "tempokey/adam.hpp"
#include "tempokey/augment.hpp"
#include "tempokey/data.hpp"
#include "tempokey/evaluate.hpp"
#include "tempokey/model.hpp"

namespace tk {

struct TrainConfig {
  Task task = Task::tempo;
  ArchConfig arch;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t patience = 100;
  std::size_t max_epochs = 1000;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const {
    arch.validate();
    if (batch_size < 1) throw RangeError("batch_size must be >= 1");
    if (patience < 1) throw RangeError("patience must be >= 1");
    if (max_epochs < 1) throw RangeError("max_epochs must be >= 1");
    if (!(lr > 0)) throw RangeError("learning rate must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  double best_val_accuracy = 0;
  double seconds = 0;  // wall clock, informational only
};

// ---------------------------------------------------------------------------
// Example preparation
// ---------------------------------------------------------------------------

// One augmentation draw and a random crop, then per-sample normalization.
// Tempo: time scale from the 11 factors; key: pitch shift from [-4, 7].
inline std::pair<Grid, std::size_t> training_example(const LabeledSample& sample,
                                                     const TaskConfig& task, bool augment,
                                                     Rng& rng) {
  if (task.task == Task::tempo) {
    const double s = augment ? draw_time_scale(rng) : 1.0;
    const Grid scaled = time_scale(model_rows(sample.spectrogram, task), s, task.train_frames);
    const std::size_t target =
        tempo_to_class(scale_tempo_label({class_to_tempo(sample.target)}, s).bpm);
    return {normalize_sample(random_time_crop(scaled, task.train_frames, rng)), target};
  }
  if (sample.spectrogram.rows != kPitchShiftSourceBins) {
    throw ShapeError("key training needs 192-bin spectrograms, got " +
                     std::to_string(sample.spectrogram.rows));
  }
  const int s = augment ? draw_key_shift(rng) : 0;
  const Grid shifted = pitch_shift_crop(sample.spectrogram, s);
  const std::size_t target = key_to_class(shift_key_label(class_to_key(sample.target), s));
  return {normalize_sample(random_time_crop(shifted, task.train_frames, rng)), target};
}

// Deterministic center crop, no augmentation.
inline Grid validation_example(const LabeledSample& sample, const TaskConfig& task) {
  return normalize_sample(center_time_crop(model_rows(sample.spectrogram, task), task.train_frames));
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct LossAndAccuracy {
  double loss = 0;
  double accuracy = 0;
};

template <typename T>
LossAndAccuracy validate_model(ModelGraph<T>& model, const std::vector<LabeledSample>& set,
                               std::size_t batch_size) {
  const TaskConfig& task = model.task();
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < set.size(); begin += batch_size) {
    const std::size_t end = std::min(set.size(), begin + batch_size);
    std::vector<Grid> grids;
    std::vector<std::size_t> labels;
    for (std::size_t i = begin; i < end; ++i) {
      grids.push_back(validation_example(set[i], task));
      labels.push_back(set[i].target);
    }
    const Tensor<T> probs = model.predict(to_batch<T>(grids));
    const Var<T> batch_loss = cross_entropy(Var<T>(probs), std::span<const std::size_t>(labels));
    loss += static_cast<double>(batch_loss.value()[0]) * static_cast<double>(labels.size());
    const std::size_t classes = task.n_classes;
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const auto row = probs.data().subspan(n * classes, classes);
      if (is_correct(argmax(row.begin(), row.end()), labels[n], task.task)) ++correct;
    }
  }
  const auto n = static_cast<double>(set.size());
  return {loss / n, static_cast<double>(correct) / n};
}

// Adam on mini-batches of augmented random crops; after every epoch the
// validation loss decides early stopping. The weights of the epoch with the
// lowest validation loss are restored before returning.
template <typename T>
TrainReport train(ModelGraph<T>& model, const std::vector<LabeledSample>& train_set,
                  const std::vector<LabeledSample>& val_set, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("train: empty training or validation set");
  if (model.task().task != config.task || model.arch() != config.arch) {
    throw ConfigMismatch("train: model does not match the training configuration");
  }
  const auto started = std::chrono::steady_clock::now();
  const TaskConfig& task = model.task();
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed),
                    static_cast<std::uint32_t>(config.seed >> 32), 0x7472u};
  Rng rng(seq);
  AdamState<T> adam;
  adam.lr = config.lr;
  std::vector<Var<T>> params = model.parameters();

  TrainReport report;
  std::vector<Tensor<T>> best_state;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<Grid> grids;
      std::vector<std::size_t> labels;
      for (std::size_t i = begin; i < end; ++i) {
        auto [grid, target] = training_example(train_set[order[i]], task, config.augment, rng);
        grids.push_back(std::move(grid));
        labels.push_back(target);
      }
      model.zero_grad();
      const Var<T> probs = model.forward(Var<T>(to_batch<T>(grids)), Mode::train, rng);
      const Var<T> loss = cross_entropy(probs, std::span<const std::size_t>(labels));
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      }
      backward(loss);
      adam_step(std::span<Var<T>>(params), adam);
      loss_sum += value * static_cast<double>(labels.size());
      const std::size_t classes = task.n_classes;
      for (std::size_t n = 0; n < labels.size(); ++n) {
        const auto row = probs.value().data().subspan(n * classes, classes);
        if (is_correct(argmax(row.begin(), row.end()), labels[n], task.task)) ++correct;
      }
    }
    model.zero_grad();

    const auto val = validate_model(model, val_set, config.batch_size);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()),
                    static_cast<double>(correct) / static_cast<double>(order.size()), val.loss,
                    val.accuracy};
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (report.best_epoch == 0 || val.loss < report.best_val_loss) {
      report.best_epoch = epoch;
      report.best_val_loss = val.loss;
      report.best_val_accuracy = val.accuracy;
      best_state = model.snapshot();
    } else if (epoch - report.best_epoch >= config.patience) {
      break;
    }
  }
  model.restore(best_state);
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// ---------------------------------------------------------------------------
// Repeated runs and model selection
// ---------------------------------------------------------------------------

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw RangeError("mean_std: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1))};
}

// Dropout with the highest mean validation accuracy; ties go to the lower p_D.
inline double select_best(const std::map<double, std::vector<double>>& val_accs_by_dropout) {
  if (val_accs_by_dropout.empty()) throw RangeError("select_best: empty group");
  std::optional<std::pair<double, double>> best;  // (p_D, mean)
  for (const auto& [p, accs] : val_accs_by_dropout) {
    const double m = mean_std(accs).mean;
    if (!best || m > best->second) best = std::make_pair(p, m);
  }
  return best->first;
}

struct ExperimentRecord {
  std::string arch;
  Task task = Task::tempo;
  int k = 1;
  double dropout = 0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double val_acc = 0;
  std::map<std::string, double> test_accs;
  std::size_t param_count = 0;
};

inline nlohmann::ordered_json to_json(const ExperimentRecord& r) {
  nlohmann::ordered_json j;
  j["arch"] = r.arch;
  j["task"] = task_name(r.task);
  j["k"] = r.k;
  j["p_D"] = r.dropout;
  j["seed"] = r.seed;
  j["epochs"] = r.epochs;
  j["best_epoch"] = r.best_epoch;
  j["val_acc"] = r.val_acc;
  j["test_accs"] = nlohmann::ordered_json::object();
  for (const auto& [tag, acc] : r.test_accs) j["test_accs"][tag] = acc;
  j["param_count"] = r.param_count;
  return j;
}

struct GridSpec {
  std::vector<std::string> archs;
  std::vector<int> ks;
  std::vector<double> dropouts;
  std::size_t runs = 5;
  TrainConfig base;  // task, lr, batch, patience, max_epochs, seed, augment
};

// Trains every (arch, k, p_D) variant `runs` times; run r uses seed
// base.seed + r for both initialization and the training stream.
// on_record sees each record with its trained model.
inline std::vector<ExperimentRecord> run_experiment(
    const GridSpec& grid, const std::vector<LabeledSample>& train_set,
    const std::vector<LabeledSample>& val_set, const std::vector<LabeledSample>& test_set,
    const std::function<void(const ExperimentRecord&, ModelGraph<float>&)>& on_record = {},
    const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (grid.runs < 1) throw RangeError("runs must be >= 1");
  std::vector<ExperimentRecord> records;
  const TaskConfig task = TaskConfig::for_task(grid.base.task);
  for (const auto& name : grid.archs) {
    for (int k : grid.ks) {
      for (double p : grid.dropouts) {
        for (std::size_t run = 0; run < grid.runs; ++run) {
          TrainConfig cfg = grid.base;
          cfg.arch = parse_arch(name, k, p);
          cfg.seed = grid.base.seed + run;
          ModelGraph<float> model = build_model<float>(task, cfg.arch, cfg.seed);
          const TrainReport rep = train(model, train_set, val_set, cfg, on_epoch);
          ExperimentRecord rec{name, cfg.task, k, p, cfg.seed, rep.epochs.size(),
                               rep.best_epoch, rep.best_val_accuracy, {},
                               count_parameters(model)};
          if (!test_set.empty()) {
            const auto metrics = summarize(test_set, predict_all(model, test_set), cfg.task);
            for (const auto& [tag, m] : metrics) rec.test_accs[tag] = headline(m, cfg.task);
          }
          if (on_record) on_record(rec, model);
          records.push_back(std::move(rec));
        }
      }
    }
  }
  return records;
}

struct VariantSummary {
  std::string arch;
  int k = 1;
  double dropout = 0;
  MeanStd val_acc;
  std::map<std::string, MeanStd> test_accs;
  bool selected = false;  // best p_D of its (arch, k) group
};

// Mean and sample std per (arch, k, p_D), with the selected dropout marked.
inline std::vector<VariantSummary> summarize_experiment(const std::vector<ExperimentRecord>& records) {
  std::map<std::tuple<std::string, int, double>, std::vector<const ExperimentRecord*>> variants;
  for (const auto& r : records) variants[{r.arch, r.k, r.dropout}].push_back(&r);
  std::map<std::pair<std::string, int>, std::map<double, std::vector<double>>> groups;
  std::vector<VariantSummary> out;
  for (const auto& [key, runs] : variants) {
    VariantSummary s;
    std::tie(s.arch, s.k, s.dropout) = key;
    std::vector<double> val;
    std::map<std::string, std::vector<double>> test;
    for (const auto* r : runs) {
      val.push_back(r->val_acc);
      for (const auto& [tag, acc] : r->test_accs) test[tag].push_back(acc);
    }
    s.val_acc = mean_std(val);
    for (const auto& [tag, accs] : test) s.test_accs[tag] = mean_std(accs);
    groups[{s.arch, s.k}][s.dropout] = val;
    out.push_back(std::move(s));
  }
  for (auto& s : out) s.selected = select_best(groups[{s.arch, s.k}]) == s.dropout;
  return out;
}

inline nlohmann::ordered_json to_json(const VariantSummary& s) {
  nlohmann::ordered_json j;
  j["arch"] = s.arch;
  j["k"] = s.k;
  j["p_D"] = s.dropout;
  j["val_acc_mean"] = s.val_acc.mean;
  j["val_acc_std"] = s.val_acc.std;
  j["test_accs"] = nlohmann::ordered_json::object();
  for (const auto& [tag, m] : s.test_accs) j["test_accs"][tag] = {{"mean", m.mean}, {"std", m.std}};
  j["selected"] = s.selected;
  return j;
}

}  // namespace tk
