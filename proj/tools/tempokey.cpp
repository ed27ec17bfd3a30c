// tempokey: synthetic corpora, spectrogram caches, training grids,
// evaluation and prediction for the tempo and key CNNs.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tempokey/tempokey.hpp"

namespace fs = std::filesystem;
using namespace tk;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kTasks = {"tempo", "key"};
const std::vector<std::string> kSubsets = {"all", "train", "validation", "test"};

std::vector<std::string> arch_names() {
  return {kArchNames.begin(), kArchNames.end()};
}

// Wraps library precondition failures on flag values as usage errors.
template <typename F>
auto checked(F&& f) {
  try {
    return f();
  } catch (const RangeError& e) {
    throw UsageError(e.what());
  }
}

SplitSpec make_split(const std::vector<double>& fractions, std::uint64_t seed) {
  SplitSpec spec;
  spec.fallback = {fractions[0], fractions[1], fractions[2]};
  spec.seed = seed;
  checked([&] {
    spec.fallback.validate();
    return 0;
  });
  return spec;
}

// Writes to a file, or to stdout for "-".
template <typename F>
void write_output(const std::string& path, F&& emit) {
  if (path == "-") {
    emit(std::cout);
    std::cout.flush();
    return;
  }
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  emit(out);
  if (!out) throw DataError("failed writing '" + path + "'");
}

std::string format_p(double p) {
  std::ostringstream s;
  s << p;
  return s.str();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string task = "tempo";
  std::size_t count = 100;
  std::string out;
  std::uint64_t seed = 0;
  int min_bpm = 60;
  int max_bpm = 180;
  double seconds = 30.0;
  std::string dataset = "synth";
};

int cmd_synth(const SynthArgs& a) {
  SynthOptions opt;
  opt.task = parse_task(a.task);
  opt.count = a.count;
  opt.seed = a.seed;
  opt.min_bpm = a.min_bpm;
  opt.max_bpm = a.max_bpm;
  opt.tempo_seconds = opt.key_seconds = a.seconds;
  opt.dataset = a.dataset;
  checked([&] { return synth_targets({opt.task, 0, 0, opt.min_bpm, opt.max_bpm}); });
  const auto entries = write_synth_corpus(a.out, opt);
  std::cerr << "wrote " << entries.size() << " clips and "
            << (fs::path(a.out) / "manifest.csv").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string manifest;
  std::string task = "tempo";
  std::string cache_dir;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const Task task = parse_task(a.task);
  const auto entries = load_manifest(a.manifest, task);
  fs::create_directories(a.cache_dir);
  std::size_t written = 0, skipped = 0, failed = 0;
  for (const auto& e : entries) {
    try {
      const fs::path src = resolve_entry_path(a.manifest, e);
      if (src.extension() == ".tksp") {
        ++skipped;
        continue;
      }
      const fs::path dst = cache_path(a.cache_dir, e);
      if (fs::exists(dst) && fs::exists(src) &&
          fs::last_write_time(dst) >= fs::last_write_time(src)) {
        ++skipped;
        continue;
      }
      const auto spec = spectrogram_spec_for(task);
      const auto s = filtered_spectrogram(load_audio(src.string(), spec.sample_rate), spec);
      write_spectrogram_cache(dst.string(), s);
      ++written;
    } catch (const std::exception& ex) {
      ++failed;
      std::cerr << "error: " << e.id << ": " << ex.what() << '\n';
    }
  }
  std::cerr << "wrote " << written << ", up to date " << skipped << ", failed " << failed << '\n';
  return failed ? kData : kOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string task = "tempo";
  std::vector<std::string> archs;
  std::vector<int> ks = {1};
  std::vector<double> dropouts = {0.1, 0.3, 0.5};
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  std::string cache_dir;
  std::string out;
  std::size_t epochs = 1000;
  std::size_t patience = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  bool no_augment = false;
  std::vector<double> split = {0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
  bool verbose = false;
};

class ReportWriter {
 public:
  explicit ReportWriter(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw DataError("cannot write report '" + path.string() + "'");
  }

  // One complete line per write, flushed before returning.
  void line(const nlohmann::ordered_json& j) {
    const std::string text = j.dump() + '\n';
    out_.write(text.data(), static_cast<std::streamsize>(text.size()));
    out_.flush();
    if (!out_) throw DataError("failed writing report");
  }

 private:
  std::ofstream out_;
};

int cmd_train(const TrainArgs& a) {
  const Task task = parse_task(a.task);
  GridSpec grid;
  grid.archs = a.archs;
  grid.ks = a.ks;
  grid.dropouts = a.dropouts;
  grid.runs = a.runs;
  grid.base.task = task;
  grid.base.lr = a.lr;
  grid.base.batch_size = a.batch_size;
  grid.base.patience = a.patience;
  grid.base.max_epochs = a.epochs;
  grid.base.seed = a.seed;
  grid.base.augment = !a.no_augment;
  for (const auto& name : grid.archs) {
    for (int k : grid.ks) {
      for (double p : grid.dropouts) {
        checked([&] {
          TrainConfig cfg = grid.base;
          cfg.arch = parse_arch(name, k, p);
          cfg.validate();
          return 0;
        });
      }
    }
  }
  const SplitSpec split_spec = make_split(a.split, a.split_seed);

  const auto entries = load_manifest(a.manifest, task);
  const Splits parts = split(entries, split_spec);
  if (parts.train.empty() || parts.validation.empty()) {
    throw DataError("split leaves an empty training or validation set");
  }
  const auto train_set = load_samples(a.manifest, parts.train, task, a.cache_dir);
  const auto val_set = load_samples(a.manifest, parts.validation, task, a.cache_dir);
  const auto test_set = load_samples(a.manifest, parts.test, task, a.cache_dir);
  std::cerr << "train " << train_set.size() << ", validation " << val_set.size() << ", test "
            << test_set.size() << '\n';

  const fs::path out_dir(a.out);
  fs::create_directories(out_dir / "weights");
  ReportWriter report(out_dir / "report.jsonl");

  std::string current;
  std::uint64_t current_seed = 0;
  double current_p = 0;
  int current_k = 0;
  auto on_epoch = [&](const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["type"] = "epoch";
    j["arch"] = current;
    j["k"] = current_k;
    j["p_D"] = current_p;
    j["seed"] = current_seed;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["train_acc"] = r.train_accuracy;
    j["val_loss"] = r.val_loss;
    j["val_acc"] = r.val_accuracy;
    report.line(j);
    if (a.verbose) {
      std::cerr << "  epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss
                << " acc " << r.val_accuracy << '\n';
    }
  };
  auto on_record = [&](const ExperimentRecord& rec, ModelGraph<float>& model) {
    const std::string file = rec.arch + "-k" + std::to_string(rec.k) + "-p" +
                             format_p(rec.dropout) + "-s" + std::to_string(rec.seed) + ".tkw";
    save_weights(model, (out_dir / "weights" / file).string());
    nlohmann::ordered_json j;
    j["type"] = "run";
    j.update(to_json(rec));
    j["weights"] = "weights/" + file;
    report.line(j);
    std::cerr << rec.arch << " k=" << rec.k << " p=" << rec.dropout << " seed " << rec.seed
              << ": best epoch " << rec.best_epoch << " of " << rec.epochs << ", val acc "
              << rec.val_acc << '\n';
  };

  // One experiment call per run so epoch lines can name their run.
  std::vector<ExperimentRecord> records;
  for (const auto& name : grid.archs) {
    for (int k : grid.ks) {
      for (double p : grid.dropouts) {
        GridSpec one = grid;
        one.archs = {name};
        one.ks = {k};
        one.dropouts = {p};
        for (std::size_t run = 0; run < grid.runs; ++run) {
          one.runs = 1;
          one.base.seed = grid.base.seed + run;
          current = name;
          current_k = k;
          current_p = p;
          current_seed = one.base.seed;
          auto recs = run_experiment(one, train_set, val_set, test_set, on_record, on_epoch);
          records.push_back(std::move(recs.front()));
        }
      }
    }
  }

  nlohmann::ordered_json summary;
  summary["task"] = task_name(task);
  summary["n_train"] = train_set.size();
  summary["n_validation"] = val_set.size();
  summary["n_test"] = test_set.size();
  summary["variants"] = nlohmann::ordered_json::array();
  for (const auto& s : summarize_experiment(records)) summary["variants"].push_back(to_json(s));
  write_output((out_dir / "summary.json").string(),
               [&](std::ostream& o) { o << summary.dump(2) << '\n'; });
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate / predict
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string weights;
  std::string manifest;
  std::string task;
  std::string cache_dir;
  std::string subset = "all";
  std::vector<double> split = {0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
  std::string out = "-";
  std::string predictions;
};

ModelGraph<float> load_model(const std::string& path, const std::string& task) {
  auto model = load_weights<float>(path);
  if (!task.empty() && parse_task(task) != model.task().task) {
    throw ConfigMismatch("weights '" + path + "' are for the " +
                         std::string(task_name(model.task().task)) + " task, not " + task);
  }
  return model;
}

int cmd_evaluate(const EvaluateArgs& a) {
  const SplitSpec split_spec = make_split(a.split, a.split_seed);
  auto model = load_model(a.weights, a.task);
  const Task task = model.task().task;
  auto entries = load_manifest(a.manifest, task);
  if (a.subset != "all") {
    const Splits parts = split(entries, split_spec);
    entries = a.subset == "train" ? parts.train
              : a.subset == "validation" ? parts.validation
                                         : parts.test;
  }
  const auto samples = load_samples(a.manifest, entries, task, a.cache_dir);
  const auto preds = predict_all(model, samples);
  const auto metrics = metrics_json(summarize(samples, preds, task), task);
  write_output(a.out, [&](std::ostream& o) { o << metrics.dump(2) << '\n'; });
  if (!a.predictions.empty()) {
    write_output(a.predictions,
                 [&](std::ostream& o) { write_predictions_csv(o, preds, &samples, task); });
  }
  return kOk;
}

struct PredictArgs {
  std::string weights;
  std::string manifest;
  std::string task;
  std::string cache_dir;
  std::vector<std::string> inputs;
  std::string out = "-";
};

int cmd_predict(const PredictArgs& a) {
  if (a.manifest.empty() && a.inputs.empty()) throw UsageError("predict: nothing to predict");
  auto model = load_model(a.weights, a.task);
  const Task task = model.task().task;
  std::vector<Prediction> preds;
  if (!a.manifest.empty()) {
    const auto entries = load_manifest(a.manifest, task);
    for (const auto& e : entries) {
      preds.push_back(
          predict_track(model, entry_spectrogram(a.manifest, e, task, a.cache_dir).values, e.id));
    }
  }
  const auto spec = spectrogram_spec_for(task);
  for (const auto& path : a.inputs) {
    const fs::path p(path);
    Spectrogram s = p.extension() == ".tksp"
                        ? read_spectrogram_cache(path)
                        : filtered_spectrogram(load_audio(path, spec.sample_rate), spec);
    if (s.spec.kind != spec.kind || s.bins() != spec.n_bins) {
      throw DataError("'" + path + "' is not a " + std::string(task_name(task)) + " spectrogram");
    }
    preds.push_back(predict_track(model, s.values, p.stem().string()));
  }
  write_output(a.out, [&](std::ostream& o) { write_predictions_csv(o, preds, nullptr, task); });
  return kOk;
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

struct ParamsArgs {
  std::string arch;
  std::string task = "tempo";
  int k = 1;
};

int cmd_params(const ParamsArgs& a) {
  const auto arch = checked([&] { return parse_arch(a.arch, a.k, 0.0); });
  std::cout << count_parameters(build_model<float>(TaskConfig::for_task(parse_task(a.task)), arch))
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tempo and key estimation CNNs with directional filters"};
  app.set_config("--config", "", "TOML/INI file of option values; flags override it");
  app.allow_config_extras(false);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic corpus and its manifest");
  s->add_option("--task", synth.task)->check(CLI::IsMember(kTasks))->capture_default_str();
  s->add_option("--count", synth.count, "Number of clips")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed)->capture_default_str();
  s->add_option("--min-bpm", synth.min_bpm)->capture_default_str();
  s->add_option("--max-bpm", synth.max_bpm)->capture_default_str();
  s->add_option("--seconds", synth.seconds, "Clip length")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  s->add_option("--dataset", synth.dataset, "Dataset tag")->capture_default_str();

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Cache spectrograms for a manifest");
  p->add_option("--manifest", pre.manifest)->required();
  p->add_option("--task", pre.task)->check(CLI::IsMember(kTasks))->capture_default_str();
  p->add_option("--cache-dir", pre.cache_dir)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a grid of (arch, k, p_D) variants");
  t->add_option("--manifest", tr.manifest)->required();
  t->add_option("--task", tr.task)->check(CLI::IsMember(kTasks))->capture_default_str();
  t->add_option("--arch", tr.archs, "One or more architectures")
      ->required()
      ->delimiter(',')
      ->check(CLI::IsMember(arch_names()));
  t->add_option("--k", tr.ks, "Width factors")
      ->delimiter(',')
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  t->add_option("--dropout", tr.dropouts, "Dropout probabilities")
      ->delimiter(',')
      ->capture_default_str();
  t->add_option("--runs", tr.runs, "Runs per variant")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--seed", tr.seed, "Seed of the first run")->capture_default_str();
  t->add_option("--cache-dir", tr.cache_dir);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--epochs", tr.epochs, "Maximum epochs")->capture_default_str();
  t->add_option("--patience", tr.patience)->capture_default_str();
  t->add_option("--batch-size", tr.batch_size)->capture_default_str();
  t->add_option("--lr", tr.lr)->capture_default_str();
  t->add_flag("--no-augment", tr.no_augment);
  t->add_option("--split", tr.split, "train,validation,test fractions")
      ->delimiter(',')
      ->expected(3)
      ->capture_default_str();
  t->add_option("--split-seed", tr.split_seed)->capture_default_str();
  t->add_flag("--verbose", tr.verbose, "Log every epoch");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Metrics per dataset tag");
  e->add_option("--weights", ev.weights)->required();
  e->add_option("--manifest", ev.manifest)->required();
  e->add_option("--task", ev.task, "Expected task of the weights")->check(CLI::IsMember(kTasks));
  e->add_option("--cache-dir", ev.cache_dir);
  e->add_option("--subset", ev.subset)->check(CLI::IsMember(kSubsets))->capture_default_str();
  e->add_option("--split", ev.split)->delimiter(',')->expected(3)->capture_default_str();
  e->add_option("--split-seed", ev.split_seed)->capture_default_str();
  e->add_option("--out", ev.out, "Metrics JSON, - for stdout")->capture_default_str();
  e->add_option("--predictions", ev.predictions, "Per-track CSV");

  PredictArgs pr;
  auto* d = app.add_subcommand("predict", "Per-track predictions as CSV");
  d->add_option("--weights", pr.weights)->required();
  d->add_option("--manifest", pr.manifest);
  d->add_option("--task", pr.task, "Expected task of the weights")->check(CLI::IsMember(kTasks));
  d->add_option("--cache-dir", pr.cache_dir);
  d->add_option("--out", pr.out, "CSV, - for stdout")->capture_default_str();
  d->add_option("inputs", pr.inputs, "Audio files or .tksp caches");

  ParamsArgs pa;
  auto* m = app.add_subcommand("params", "Print the parameter count of a model");
  m->add_option("--arch", pa.arch)->required()->check(CLI::IsMember(arch_names()));
  m->add_option("--task", pa.task)->check(CLI::IsMember(kTasks))->capture_default_str();
  m->add_option("--k", pa.k)->check(CLI::PositiveNumber)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*p) return cmd_preprocess(pre);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_evaluate(ev);
    if (*d) return cmd_predict(pr);
    if (*m) return cmd_params(pa);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kUsage;
  } catch (const ConfigMismatch& err) {
    std::cerr << "config mismatch: " << err.what() << '\n';
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return kNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kData;
  }
  return kUsage;
}
