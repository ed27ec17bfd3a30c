#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tempokey/augment.hpp"
#include "tempokey/data.hpp"
#include "tempokey/labels.hpp"
#include "tempokey/model.hpp"

namespace tk {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kTempoTolerance = 0.04;
inline constexpr std::array<double, 5> kOctaveFactors = {1.0 / 3, 0.5, 1.0, 2.0, 3.0};

// |est - ref| <= 4% of ref, inclusive.
inline bool accuracy1(double estimate, double reference) {
  if (!(reference > 0)) throw RangeError("accuracy1: reference tempo must be positive");
  return std::abs(estimate - reference) <= kTempoTolerance * reference * (1 + 1e-12);
}

inline bool accuracy2(double estimate, double reference) {
  if (!(reference > 0)) throw RangeError("accuracy2: reference tempo must be positive");
  return std::any_of(kOctaveFactors.begin(), kOctaveFactors.end(),
                     [&](double f) { return accuracy1(estimate, reference * f); });
}

inline bool key_accuracy(KeyLabel estimate, KeyLabel reference) { return estimate == reference; }

// 1.0 exact, 0.5 fifth (tonic +-7 semitones, same mode), 0.3 relative
// major/minor, 0.2 parallel major/minor, else 0.
inline double weighted_key_score(KeyLabel estimate, KeyLabel reference) {
  key_to_class(estimate);
  key_to_class(reference);
  if (estimate == reference) return 1.0;
  const int up = ((estimate.tonic - reference.tonic) % 12 + 12) % 12;
  if (estimate.mode == reference.mode) return (up == 7 || up == 5) ? 0.5 : 0.0;
  if (up == 0) return 0.2;
  const bool relative = reference.mode == KeyMode::major ? up == 9 : up == 3;
  return relative ? 0.3 : 0.0;
}

// Headline correctness of a predicted class: Accuracy1 for tempo, exact
// match for key.
inline bool is_correct(std::size_t predicted, std::size_t target, Task task) {
  if (task == Task::tempo) return accuracy1(class_to_tempo(predicted), class_to_tempo(target));
  return predicted == target;
}

// ---------------------------------------------------------------------------
// Model inputs
// ---------------------------------------------------------------------------

// The frequency extent the model sees: 192-bin key grids are cut to the
// unshifted 168-bin window.
inline Grid model_rows(const Grid& g, const TaskConfig& task) {
  if (task.task == Task::key && g.rows == kPitchShiftSourceBins) return pitch_shift_crop(g, 0);
  if (g.rows != task.input_bins) {
    throw ShapeError("spectrogram has " + std::to_string(g.rows) + " bins, " +
                     std::string(task_name(task.task)) + " models take " +
                     std::to_string(task.input_bins));
  }
  return g;
}

template <typename T>
Tensor<T> to_batch(const std::vector<Grid>& grids) {
  if (grids.empty()) throw ShapeError("empty batch");
  const std::size_t rows = grids[0].rows, cols = grids[0].cols;
  Tensor<T> out({grids.size(), 1, rows, cols});
  auto dst = out.data();
  for (std::size_t n = 0; n < grids.size(); ++n) {
    if (grids[n].rows != rows || grids[n].cols != cols) throw ShapeError("ragged batch");
    std::transform(grids[n].values.begin(), grids[n].values.end(),
                   dst.begin() + static_cast<std::ptrdiff_t>(n * rows * cols),
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

// First index of the largest value.
template <typename It>
std::size_t argmax(It first, It last) {
  return static_cast<std::size_t>(std::distance(first, std::max_element(first, last)));
}

// ---------------------------------------------------------------------------
// Whole-track prediction
// ---------------------------------------------------------------------------

struct Prediction {
  std::string id;
  std::size_t predicted = 0;
  std::vector<float> distribution;
  std::string label;  // decoded bpm or key name
};

// Eval-mode forward on the entire normalized spectrogram.
template <typename T>
Prediction predict_track(ModelGraph<T>& model, const Grid& spectrogram, std::string id = "") {
  const TaskConfig& task = model.task();
  Grid input = normalize_sample(model_rows(spectrogram, task));
  if (input.cols < model.min_frames()) {
    throw ShapeError("track '" + id + "' has " + std::to_string(input.cols) +
                     " frames, model needs " + std::to_string(model.min_frames()));
  }
  const Tensor<T> probs = model.predict(to_batch<T>({input}));
  Prediction p;
  p.id = std::move(id);
  p.distribution.assign(probs.data().begin(), probs.data().end());
  p.predicted = argmax(p.distribution.begin(), p.distribution.end());
  p.label = format_label(p.predicted, task.task);
  return p;
}

// ---------------------------------------------------------------------------
// Aggregates and reports
// ---------------------------------------------------------------------------

template <typename F>
double mean_over(std::size_t n, F&& value) {
  if (n == 0) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += static_cast<double>(value(i));
  return total / static_cast<double>(n);
}

struct DatasetMetrics {
  std::size_t n = 0;
  double accuracy1 = 0;
  double accuracy2 = 0;
  double key_accuracy = 0;
  double weighted_score = 0;
};

// Metrics per dataset tag; predictions[i] belongs to samples[i].
inline std::map<std::string, DatasetMetrics> summarize(const std::vector<LabeledSample>& samples,
                                                       const std::vector<Prediction>& predictions,
                                                       Task task) {
  if (samples.size() != predictions.size()) throw ShapeError("prediction count mismatch");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].dataset].push_back(i);
  std::map<std::string, DatasetMetrics> out;
  for (const auto& [tag, idx] : groups) {
    DatasetMetrics m;
    m.n = idx.size();
    auto est = [&](std::size_t i) { return predictions[idx[i]].predicted; };
    auto ref = [&](std::size_t i) { return samples[idx[i]].target; };
    if (task == Task::tempo) {
      m.accuracy1 = mean_over(m.n, [&](std::size_t i) {
        return accuracy1(class_to_tempo(est(i)), class_to_tempo(ref(i)));
      });
      m.accuracy2 = mean_over(m.n, [&](std::size_t i) {
        return accuracy2(class_to_tempo(est(i)), class_to_tempo(ref(i)));
      });
    } else {
      m.key_accuracy = mean_over(m.n, [&](std::size_t i) {
        return key_accuracy(class_to_key(est(i)), class_to_key(ref(i)));
      });
      m.weighted_score = mean_over(m.n, [&](std::size_t i) {
        return weighted_key_score(class_to_key(est(i)), class_to_key(ref(i)));
      });
    }
    out[tag] = m;
  }
  return out;
}

// Headline accuracy of a dataset: Accuracy1 or key accuracy.
inline double headline(const DatasetMetrics& m, Task task) {
  return task == Task::tempo ? m.accuracy1 : m.key_accuracy;
}

template <typename T>
std::vector<Prediction> predict_all(ModelGraph<T>& model, const std::vector<LabeledSample>& samples) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(predict_track(model, s.spectrogram, s.id));
  return out;
}

inline nlohmann::ordered_json metrics_json(const std::map<std::string, DatasetMetrics>& metrics,
                                           Task task) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& [tag, m] : metrics) {
    nlohmann::ordered_json entry;
    entry["n"] = m.n;
    if (task == Task::tempo) {
      entry["accuracy1"] = m.accuracy1;
      entry["accuracy2"] = m.accuracy2;
    } else {
      entry["key_accuracy"] = m.key_accuracy;
      entry["weighted_score"] = m.weighted_score;
    }
    out[tag] = entry;
  }
  return out;
}

// id,dataset,predicted,reference,probability
inline void write_predictions_csv(std::ostream& out, const std::vector<Prediction>& predictions,
                                  const std::vector<LabeledSample>* samples, Task task) {
  out << "id,dataset,predicted,reference,probability\n";
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    out << p.id << ',' << (samples ? (*samples)[i].dataset : "") << ',' << p.label << ','
        << (samples ? format_label((*samples)[i].target, task) : "") << ','
        << p.distribution[p.predicted] << '\n';
  }
}

inline void write_predictions_csv(const std::string& path,
                                  const std::vector<Prediction>& predictions,
                                  const std::vector<LabeledSample>* samples, Task task) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write predictions '" + path + "'");
  write_predictions_csv(out, predictions, samples, task);
  if (!out) throw DataError("failed writing predictions '" + path + "'");
}

}  // namespace tk
