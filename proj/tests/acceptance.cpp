// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "gradcheck.hpp"
#include "key_table.hpp"
#include "tempokey/tempokey.hpp"

namespace fs = std::filesystem;
using namespace tk;
using tk::testing::grad_check;
using tk::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
std::string only;  // optional substring filter on criterion names

void report(const std::string& name, const std::function<Outcome()>& body) {
  if (name.find(only) == std::string::npos) return;
  const auto start = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  std::ostringstream line;
  line << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << " ["
       << std::fixed << std::setprecision(1) << seconds_since(start) << " s]";
  std::cout << line.str() << std::endl;
  if (!o.pass) ++failures;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// Parameter counts
// ---------------------------------------------------------------------------

Outcome parameter_counts() {
  struct Case {
    const char* arch;
    Task task;
    int k;
    std::size_t expected;
  };
  const Case cases[] = {
      {"shallow-temp", Task::tempo, 1, 33092}, {"shallow-temp", Task::tempo, 2, 98696},
      {"shallow-spec", Task::key, 1, 12380},   {"shallow-spec", Task::key, 8, 700984},
      {"deep-temp", Task::tempo, 2, 9322},     {"deep-spec", Task::key, 2, 5378},
      {"deep-square", Task::tempo, 1, 7134},   {"deep-square", Task::key, 1, 5046},
  };
  const auto start = Clock::now();
  std::size_t exact = 0;
  std::string mismatches;
  for (const auto& c : cases) {
    const auto n = count_parameters(
        build_model<float>(TaskConfig::for_task(c.task), parse_arch(c.arch, c.k, 0.1)));
    if (n == c.expected) {
      ++exact;
    } else {
      mismatches += std::string(" ") + c.arch + "/k" + std::to_string(c.k) + "=" +
                    std::to_string(n);
    }
  }
  const double t = seconds_since(start);
  return {exact == std::size(cases) && t < 1.0,
          std::to_string(exact) + "/8 exact" + mismatches + ", " + fmt(t, 3) + " s"};
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

template <typename T, typename Build>
testing::GradCheckResult layer_check(Build build, const std::vector<Tensor<T>>& values,
                                     const Tensor<T>& out_weights) {
  std::vector<Var<T>> a;
  std::vector<Var<double>> d;
  for (const auto& v : values) {
    a.push_back(Var<T>::parameter(v));
    d.push_back(Var<double>::parameter(v.template cast<double>()));
  }
  const Tensor<double> wd = out_weights.template cast<double>();
  return grad_check<T>([&] { return weighted_sum(build(a), out_weights); }, a,
                       [&] { return weighted_sum(build(d), wd); }, d, 20, 99);
}

template <typename V>
using scalar_of = typename std::decay_t<V>::value_type::value_type;

// Worst error and fewest probes over every layer type, in precision T.
template <typename T>
std::pair<double, std::size_t> layer_checks() {
  std::mt19937_64 rng(123);
  const auto x = random_tensor<T>({2, 2, 5, 6}, rng);
  std::vector<testing::GradCheckResult> results;
  results.push_back(layer_check<T>(
      [](auto& in) { return conv2d(in[0], in[1], in[2], Padding::same); },
      {x, random_tensor<T>({3, 2, 3, 3}, rng), random_tensor<T>({3}, rng)},
      random_tensor<T>({2, 3, 5, 6}, rng)));
  results.push_back(layer_check<T>(
      [](auto& in) { return conv2d(in[0], in[1], in[2], Padding::valid); },
      {x, random_tensor<T>({3, 2, 1, 6}, rng), random_tensor<T>({3}, rng)},
      random_tensor<T>({2, 3, 5, 1}, rng)));
  const auto pooled = random_tensor<T>({2, 2, 2, 3}, rng);
  results.push_back(
      layer_check<T>([](auto& in) { return pool2d(in[0], 2, 2, PoolMode::max); }, {x}, pooled));
  results.push_back(
      layer_check<T>([](auto& in) { return pool2d(in[0], 2, 2, PoolMode::avg); }, {x}, pooled));
  for (Mode mode : {Mode::train, Mode::eval}) {
    results.push_back(layer_check<T>(
        [mode](auto& in) {
          using U = scalar_of<decltype(in)>;
          BatchNormState<U> state(2);
          state.running_mean[0] = U(0.3);
          state.running_var[1] = U(2.0);
          return batchnorm(in[0], in[1], in[2], state, mode);
        },
        {x, random_tensor<T>({2}, rng, 0.5, 1.5), random_tensor<T>({2}, rng)},
        random_tensor<T>({2, 2, 5, 6}, rng)));
  }
  results.push_back(layer_check<T>(
      [](auto& in) {
        Rng local(17);
        return dropout(in[0], 0.4, Mode::train, local);
      },
      {x}, random_tensor<T>({2, 2, 5, 6}, rng)));
  results.push_back(layer_check<T>([](auto& in) { return relu(in[0]); }, {x},
                                   random_tensor<T>({2, 2, 5, 6}, rng)));
  results.push_back(layer_check<T>([](auto& in) { return global_avg_pool(in[0]); }, {x},
                                   random_tensor<T>({2, 2}, rng)));
  results.push_back(layer_check<T>([](auto& in) { return softmax(in[0]); },
                                   {random_tensor<T>({3, 7}, rng, -2, 2)},
                                   random_tensor<T>({3, 7}, rng)));
  const std::vector<std::size_t> labels = {0, 5, 2, 2};
  results.push_back(layer_check<T>(
      [&](auto& in) { return cross_entropy(softmax(in[0]), labels); },
      {random_tensor<T>({4, 6}, rng, -2, 2)}, Tensor<T>({1}, T(1))));
  double worst = 0;
  std::size_t fewest = SIZE_MAX;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    fewest = std::min(fewest, r.probes);
  }
  return {worst, fewest};
}

// Cross-entropy of a whole architecture in training mode, differentiated
// with respect to every parameter tensor. Zero-initialized biases put exact
// ReLU kinks under dropout-zeroed windows, so parameters are jittered to a
// generic point first. Input is a batch of two training crops.
template <typename T>
testing::ScreenedResult architecture_check(const std::string& arch, Task task) {
  const TaskConfig cfg = TaskConfig::for_task(task);
  auto base = build_model<float>(cfg, parse_arch(arch, 1, 0.1), 21);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> jitter(-0.1f, 0.1f);
  for (auto& p : base.parameters())
    for (auto& v : p.value().data()) v += jitter(rng);
  auto analytic = convert_model<T>(base);
  auto numeric = convert_model<double>(base);
  const auto input = random_tensor<float>({2, 1, cfg.input_bins, cfg.train_frames}, rng);
  const std::vector<std::size_t> labels = {3, cfg.n_classes - 2};
  auto loss = [&labels, &input]<typename U>(ModelGraph<U>& model) {
    return [&model, &labels, x = Var<U>(input.template cast<U>())] {
      Rng masks(8);
      return cross_entropy(model.forward(x, Mode::train, masks), labels);
    };
  };
  return testing::screened_grad_check<T>(loss(analytic), analytic.parameters(), loss(numeric),
                                         numeric.parameters(), 24, 77);
}

Outcome gradient_checks() {
  const auto start = Clock::now();
  std::ostringstream detail;
  bool pass = true;
  const auto [lf, lf_probes] = layer_checks<float>();
  const auto [ld, ld_probes] = layer_checks<double>();
  pass = pass && lf < 1e-3 && ld < 1e-5 && lf_probes >= 20 && ld_probes >= 20;
  detail << "layers float " << std::scientific << std::setprecision(2) << lf << ", double " << ld;
  double af = 0, ad = 0;
  std::size_t fewest = SIZE_MAX, skipped = 0;
  const std::pair<const char*, Task> archs[] = {
      {"shallow-temp", Task::tempo}, {"deep-temp", Task::tempo}, {"shallow-spec", Task::key},
      {"deep-spec", Task::key},      {"deep-square", Task::tempo}, {"deep-square", Task::key}};
  for (const auto& [arch, task] : archs) {
    const auto f = architecture_check<float>(arch, task);
    const auto d = architecture_check<double>(arch, task);
    af = std::max(af, f.max_rel_error);
    ad = std::max(ad, d.max_rel_error);
    fewest = std::min({fewest, f.probes, d.probes});
    skipped += d.skipped;
  }
  pass = pass && af < 1e-3 && ad < 1e-5 && fewest >= 20;
  const double t = seconds_since(start);
  pass = pass && t < 120;
  detail << "; architectures float " << af << ", double " << ad << " (" << std::defaultfloat
         << skipped << " probes near a ReLU/max-pool switch redrawn); min probes "
         << std::min({lf_probes, ld_probes, fewest}) << ", "
         << fmt(t, 1) << " s";
  return {pass, detail.str()};
}

// ---------------------------------------------------------------------------
// Directional invariance
// ---------------------------------------------------------------------------

Outcome directional_invariance() {
  std::mt19937_64 rng(11);
  auto temp = build_model<float>(TaskConfig::tempo(), parse_arch("shallow-temp", 2, 0.3), 4);
  auto spec = build_model<float>(TaskConfig::key(), parse_arch("shallow-spec", 2, 0.3), 4);
  double worst_temp = 0, worst_spec = 0;
  for (int trial = 0; trial < 100; ++trial) {
    {
      const auto x = random_tensor<float>({1, 1, 40, 256}, rng);
      std::vector<std::size_t> perm(40);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor<float> y(x.shape());
      for (std::size_t f = 0; f < 40; ++f)
        for (std::size_t t = 0; t < 256; ++t) y.at(0, 0, f, t) = x.at(0, 0, perm[f], t);
      const auto a = temp.predict(x), b = temp.predict(y);
      for (std::size_t i = 0; i < a.size(); ++i)
        worst_temp = std::max(worst_temp, static_cast<double>(std::abs(a[i] - b[i])));
    }
    {
      const auto x = random_tensor<float>({1, 1, 168, 60}, rng);
      std::vector<std::size_t> perm(60);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor<float> y(x.shape());
      for (std::size_t f = 0; f < 168; ++f)
        for (std::size_t t = 0; t < 60; ++t) y.at(0, 0, f, t) = x.at(0, 0, f, perm[t]);
      const auto a = spec.predict(x), b = spec.predict(y);
      for (std::size_t i = 0; i < a.size(); ++i)
        worst_spec = std::max(worst_spec, static_cast<double>(std::abs(a[i] - b[i])));
    }
  }
  std::ostringstream d;
  d << "100 inputs each; max change shallow-temp " << std::scientific << std::setprecision(2)
    << worst_temp << " under row permutations, shallow-spec " << worst_spec
    << " under column permutations";
  return {worst_temp <= 1e-5 && worst_spec <= 1e-5, d.str()};
}

// ---------------------------------------------------------------------------
// Desk-scale training
// ---------------------------------------------------------------------------

struct Corpus {
  std::vector<LabeledSample> train, validation, test;
};

// 400 clips; 20% held out for test, and a tenth of the whole corpus carved
// from the training share for early stopping.
Corpus synthetic_corpus(Task task) {
  SynthOptions opt;
  opt.task = task;
  opt.count = 400;
  opt.seed = 7;
  const auto targets = synth_targets(opt);
  const auto spec = spectrogram_spec_for(task);
  std::vector<LabeledSample> all;
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    all.push_back({std::to_string(i), "synth",
                   filtered_spectrogram(synth_clip(opt, targets[i], i), spec).values, targets[i]});
    entries.push_back({std::to_string(i), "", format_label(targets[i], task), "synth", targets[i]});
  }
  SplitSpec split_spec;
  split_spec.fallback = {0.7, 0.1, 0.2};
  split_spec.seed = 1;
  const Splits parts = split(entries, split_spec);
  auto pick = [&](const std::vector<ManifestEntry>& es) {
    std::vector<LabeledSample> out;
    for (const auto& e : es) out.push_back(all[std::stoul(e.id)]);
    return out;
  };
  return {pick(parts.train), pick(parts.validation), pick(parts.test)};
}

struct TrainedResult {
  double headline = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs = 0;
  std::vector<Prediction> predictions;
};

TrainedResult train_and_test(const Corpus& c, Task task, const std::string& arch, int k, double p) {
  TrainConfig cfg;
  cfg.task = task;
  cfg.arch = parse_arch(arch, k, p);
  cfg.max_epochs = 500;
  cfg.seed = 1;
  auto model = build_model<float>(TaskConfig::for_task(task), cfg.arch, 1);
  const auto rep = train(model, c.train, c.validation, cfg);
  TrainedResult r;
  r.predictions = predict_all(model, c.test);
  r.headline = headline(summarize(c.test, r.predictions, task).at("synth"), task);
  r.best_epoch = rep.best_epoch;
  r.epochs = rep.epochs.size();
  return r;
}

std::string split_sizes(const Corpus& c) {
  return std::to_string(c.train.size()) + "/" + std::to_string(c.validation.size()) + "/" +
         std::to_string(c.test.size());
}

Outcome tempo_training(const Corpus& c, Clock::time_point synth_start) {
  const auto r = train_and_test(c, Task::tempo, "shallow-temp", 2, 0.3);
  const double t = seconds_since(synth_start);
  return {r.headline >= 0.85 && t <= 1800,
          "shallow-temp k=2 p_D=0.3, split " + split_sizes(c) + ", best epoch " +
              std::to_string(r.best_epoch) + "/" + std::to_string(r.epochs) +
              ", test Accuracy1 " + fmt(r.headline) + " (>= 0.85), " + fmt(t, 0) +
              " s including synthesis"};
}

Outcome key_training() {
  const auto start = Clock::now();
  const Corpus c = synthetic_corpus(Task::key);
  const auto r = train_and_test(c, Task::key, "shallow-spec", 2, 0.3);
  const double t = seconds_since(start);
  return {r.headline >= 0.80 && t <= 1800,
          "shallow-spec k=2 p_D=0.3, pitch-shift augmentation, split " + split_sizes(c) +
              ", best epoch " + std::to_string(r.best_epoch) + "/" + std::to_string(r.epochs) +
              ", test key accuracy " + fmt(r.headline) + " (>= 0.80), " + fmt(t, 0) +
              " s including synthesis"};
}

// Expected Accuracy1 on the test references of guessing an integer tempo
// uniformly from the generator's range, and from all classes.
std::pair<double, double> random_baselines(const std::vector<LabeledSample>& test) {
  auto expected = [&](int lo, int hi) {
    double total = 0;
    for (int guess = lo; guess <= hi; ++guess) {
      for (const auto& s : test) total += accuracy1(guess, class_to_tempo(s.target));
    }
    return total / static_cast<double>(test.size()) / (hi - lo + 1);
  };
  return {expected(60, 180), expected(kMinBpm, kMaxBpm)};
}

Outcome cross_direction(const Corpus& c) {
  const auto r = train_and_test(c, Task::tempo, "shallow-spec", 2, 0.3);
  const auto [range_baseline, class_baseline] = random_baselines(c.test);
  std::set<std::size_t> distinct;
  for (const auto& p : r.predictions) distinct.insert(p.predicted);
  return {r.headline <= 3 * range_baseline,
          "shallow-spec on tempo, test Accuracy1 " + fmt(r.headline) + " <= 3 x " +
              fmt(range_baseline) + " (uniform guess over 60-180 BPM; over all 256 classes " +
              fmt(class_baseline) + "), " + std::to_string(distinct.size()) +
              " distinct predictions"};
}

// ---------------------------------------------------------------------------
// Metric suite
// ---------------------------------------------------------------------------

Outcome metric_suite() {
  const auto start = Clock::now();
  std::size_t checks = 0, failed = 0;
  auto expect = [&](bool ok) {
    ++checks;
    failed += !ok;
  };
  for (std::size_t i = 0; i < kTempoClasses; ++i) {
    expect(class_to_tempo(i) == 30 + static_cast<int>(i));
    expect(tempo_to_class(30 + static_cast<int>(i)) == i);
  }
  for (int bpm : {29, 286}) {
    bool threw = false;
    try {
      tempo_to_class(bpm);
    } catch (const RangeError&) {
      threw = true;
    }
    expect(threw);
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < kKeyClasses; ++i) {
    const KeyLabel key = class_to_key(i);
    expect(key_to_class(key) == i);
    expect(parse_key(key_name(key)) == key);
    expect((i < 12) == (key.mode == KeyMode::major));
    names.insert(key_name(key));
  }
  expect(names.size() == 24);
  expect(accuracy1(124.8, 120));
  expect(!accuracy1(124.9, 120));
  expect(accuracy1(115.2, 120));
  expect(!accuracy1(115.1, 120));
  for (double f : {1.0 / 3, 0.5, 1.0, 2.0, 3.0}) {
    expect(accuracy2(120 * f, 120));
    expect(accuracy2(120 * f * 1.039, 120));
  }
  for (double f : {0.25, 2.0 / 3, 1.5, 4.0}) expect(!accuracy2(120 * f, 120));
  std::size_t pairs = 0;
  for (const auto& row : testing::kHandTable) {
    const KeyLabel ref = parse_key(row.reference);
    for (std::size_t e = 0; e < kKeyClasses; ++e) {
      const KeyLabel est = class_to_key(e);
      expect(weighted_key_score(est, ref) == testing::hand_score(row, est));
      expect(key_accuracy(est, ref) == (est == ref));
      ++pairs;
    }
  }
  expect(pairs == 576);
  const double t = seconds_since(start);
  return {failed == 0 && t < 1.0, std::to_string(checks - failed) + "/" + std::to_string(checks) +
                                      " checks (256 tempo classes, 24 keys, " +
                                      std::to_string(pairs) + " key pairs), " + fmt(t, 3) + " s"};
}

// ---------------------------------------------------------------------------
// Fully-convolutional inference
// ---------------------------------------------------------------------------

Outcome fully_convolutional() {
  std::mt19937_64 rng(3);
  std::size_t ok = 0, total = 0;
  std::string bad;
  for (const auto name : kArchNames) {
    for (Task task : {Task::tempo, Task::key}) {
      ++total;
      const TaskConfig cfg = TaskConfig::for_task(task);
      auto model = build_model<float>(cfg, parse_arch(name, 1, 0.1), 2);
      const std::size_t frames = task == Task::tempo ? 512 : 120;
      const auto x = random_tensor<float>({1, 1, cfg.input_bins, frames}, rng);
      const auto a = model.predict(x);
      const auto b = model.predict(x);
      double sum = 0;
      bool nonneg = true;
      for (float v : a.data()) {
        sum += v;
        nonneg = nonneg && v >= 0;
      }
      if (a.size() == cfg.n_classes && nonneg && std::abs(sum - 1.0) < 1e-5 && a == b) {
        ++ok;
      } else {
        bad += " " + std::string(name) + "/" + std::string(task_name(task));
      }
    }
  }
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                           " arch/task pairs on 40x512 and 168x120 inputs give bitwise-repeatable"
                           " distributions" + bad};
}

// ---------------------------------------------------------------------------
// Reproducible training reports
// ---------------------------------------------------------------------------

int run(const std::string& args) {
  const std::string cmd = std::string(TEMPOKEY_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome reproducible_reports() {
  const fs::path dir = fs::temp_directory_path() / "tempokey_acceptance_repro";
  fs::remove_all(dir);
  const std::string corpus = (dir / "corpus").string();
  if (run("synth --task tempo --count 16 --seconds 16 --seed 5 --out '" + corpus + "'") != 0) {
    return {false, "synth failed"};
  }
  const std::string base = "train --manifest '" + corpus +
                           "/manifest.csv' --task tempo --arch shallow-temp,deep-square --k 1 "
                           "--dropout 0.1,0.3 --runs 2 --epochs 4 --seed 3 --out '";
  const int a = run(base + (dir / "a").string() + "'");
  const int b = run(base + (dir / "b").string() + "'");
  if (a != 0 || b != 0) return {false, "train exited with " + std::to_string(a) + "/" + std::to_string(b)};
  const std::string ra = slurp(dir / "a" / "report.jsonl");
  const std::string rb = slurp(dir / "b" / "report.jsonl");
  const auto lines = std::count(ra.begin(), ra.end(), '\n');
  return {!ra.empty() && ra == rb,
          "two train invocations (8 runs, " + std::to_string(lines) + " report lines, " +
              std::to_string(ra.size()) + " bytes) " + (ra == rb ? "byte-identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) only = argv[1];
  std::cout << std::unitbuf;
  report("parameter counts", parameter_counts);
  report("gradient checks", gradient_checks);
  report("directional invariance", directional_invariance);
  const auto synth_start = Clock::now();
  std::optional<Corpus> tempo;
  auto tempo_corpus = [&]() -> const Corpus& {
    if (!tempo) tempo = synthetic_corpus(Task::tempo);
    return *tempo;
  };
  report("tempo training", [&] { return tempo_training(tempo_corpus(), synth_start); });
  report("key training", key_training);
  report("cross-direction tempo", [&] { return cross_direction(tempo_corpus()); });
  report("metric suite", metric_suite);
  report("fully-convolutional inference", fully_convolutional);
  report("reproducible reports", reproducible_reports);
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << failures << " failing" << std::endl;
  return failures ? 1 : 0;
}
