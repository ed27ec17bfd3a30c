#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tempokey/tempokey.hpp"

namespace fs = std::filesystem;
using namespace tk;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr discarded; stdout is captured.
Result cli(const std::string& args) {
  const std::string cmd = std::string(TEMPOKEY_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (const std::size_t n = fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tempokey_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

Spectrogram noise_spectrogram(Task task, std::size_t frames, std::uint64_t seed) {
  Spectrogram s;
  s.spec = spectrogram_spec_for(task);
  s.frame_duration = s.spec.frame_duration();
  s.values = Grid(s.spec.n_bins, frames);
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : s.values.values) v = u(rng);
  return s;
}

// A model whose class head ignores its input and always picks class 0.
void save_class0_model(Task task, const std::string& arch, const fs::path& path) {
  auto model = build_model<float>(TaskConfig::for_task(task), parse_arch(arch, 1, 0.1), 1);
  auto params = model.parameters();
  for (auto& v : params[params.size() - 2].value().data()) v = 0.0f;
  auto& b = params.back().value();
  for (auto& v : b.data()) v = 0.0f;
  b[0] = 1.0f;
  save_weights(model, path.string());
}

}  // namespace

TEST_CASE("params prints parameter counts", "[cli]") {
  auto r = cli("params --arch shallow-temp --task tempo --k 1");
  CHECK(r.code == 0);
  CHECK(r.out == "33092\n");
  r = cli("params --arch deep-square --task key --k 1");
  CHECK(r.code == 0);
  CHECK(r.out == "5046\n");
  CHECK(cli("params --arch shallow-spec --task key --k 8").out == "700984\n");
}

TEST_CASE("usage errors exit with 1", "[cli]") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("params --arch wide-temp").code == 1);
  CHECK(cli("params --arch deep-temp --task bpm").code == 1);
  CHECK(cli("params --arch deep-temp --k 0").code == 1);
  CHECK(cli("params --task tempo").code == 1);
  CHECK(cli("synth --task tempo --count 3").code == 1);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("config files", "[cli]") {
  const auto dir = fresh_dir("config");
  write_text(dir / "grid.toml", "[params]\narch = \"deep-square\"\ntask = \"key\"\n");
  SECTION("values are read") {
    const auto r = cli("--config " + q(dir / "grid.toml") + " params");
    CHECK(r.code == 0);
    CHECK(r.out == "5046\n");
  }
  SECTION("flags win") {
    const auto r = cli("--config " + q(dir / "grid.toml") + " params --task tempo");
    CHECK(r.code == 0);
    CHECK(r.out == "7134\n");
  }
  SECTION("unknown keys are rejected") {
    write_text(dir / "bad.toml", "[params]\narch = \"deep-square\"\nwidth = 3\n");
    CHECK(cli("--config " + q(dir / "bad.toml") + " params").code == 1);
    write_text(dir / "bad2.toml", "epochs = 3\n");
    CHECK(cli("--config " + q(dir / "bad2.toml") + " params --arch deep-temp").code == 1);
  }
}

TEST_CASE("synth", "[cli]") {
  const auto dir = fresh_dir("synth");
  SECTION("count 0 writes an empty manifest") {
    CHECK(cli("synth --task tempo --count 0 --out " + q(dir / "empty")).code == 0);
    CHECK(slurp(dir / "empty" / "manifest.csv") == "id,path,label,dataset\n");
  }
  SECTION("same seed, same corpus") {
    const std::string args = "synth --task tempo --count 6 --seconds 2 --seed 9 --min-bpm 90 "
                             "--max-bpm 110 --out ";
    REQUIRE(cli(args + q(dir / "a")).code == 0);
    REQUIRE(cli(args + q(dir / "b")).code == 0);
    REQUIRE(cli("synth --task tempo --count 6 --seconds 2 --seed 10 --out " + q(dir / "c")).code ==
            0);
    CHECK(slurp(dir / "a" / "manifest.csv") == slurp(dir / "b" / "manifest.csv"));
    CHECK(slurp(dir / "a" / "manifest.csv") != slurp(dir / "c" / "manifest.csv"));
    const auto entries = load_manifest((dir / "a" / "manifest.csv").string(), Task::tempo);
    REQUIRE(entries.size() == 6);
    for (const auto& e : entries) {
      const int bpm = class_to_tempo(e.target);
      CHECK((bpm >= 90 && bpm <= 110));
      CHECK(slurp(dir / "a" / e.path) == slurp(dir / "b" / e.path));
    }
  }
  SECTION("key corpus") {
    REQUIRE(cli("synth --task key --count 24 --seconds 1 --out " + q(dir / "k")).code == 0);
    const auto entries = load_manifest((dir / "k" / "manifest.csv").string(), Task::key);
    std::set<std::size_t> classes;
    for (const auto& e : entries) classes.insert(e.target);
    CHECK(classes.size() == 24);
  }
  SECTION("bad tempo range") {
    CHECK(cli("synth --count 2 --min-bpm 10 --out " + q(dir / "x")).code == 1);
    CHECK(cli("synth --count 2 --min-bpm 150 --max-bpm 100 --out " + q(dir / "x")).code == 1);
  }
}

TEST_CASE("preprocess", "[cli]") {
  const auto dir = fresh_dir("preprocess");
  REQUIRE(cli("synth --task tempo --count 3 --seconds 3 --out " + q(dir / "t")).code == 0);
  REQUIRE(cli("synth --task key --count 2 --seconds 3 --out " + q(dir / "k")).code == 0);
  const std::string tempo_args =
      "preprocess --task tempo --manifest " + q(dir / "t" / "manifest.csv") + " --cache-dir " +
      q(dir / "tc");
  REQUIRE(cli(tempo_args).code == 0);
  REQUIRE(cli("preprocess --task key --manifest " + q(dir / "k" / "manifest.csv") +
              " --cache-dir " + q(dir / "kc"))
              .code == 0);

  const auto tempo = load_manifest((dir / "t" / "manifest.csv").string(), Task::tempo);
  std::map<std::string, fs::file_time_type> stamps;
  for (const auto& e : tempo) {
    const auto s = read_spectrogram_cache(cache_path((dir / "tc").string(), e).string());
    CHECK(s.bins() == 40);
    CHECK(s.frames() == 3 * 11025 / s.spec.hop_size + 1);
    stamps[e.id] = fs::last_write_time(cache_path((dir / "tc").string(), e));
  }
  for (const auto& e : load_manifest((dir / "k" / "manifest.csv").string(), Task::key)) {
    CHECK(read_spectrogram_cache(cache_path((dir / "kc").string(), e).string()).bins() == 192);
  }

  SECTION("a rerun rewrites nothing") {
    REQUIRE(cli(tempo_args).code == 0);
    for (const auto& e : tempo) {
      CHECK(fs::last_write_time(cache_path((dir / "tc").string(), e)) == stamps[e.id]);
    }
  }
  SECTION("a newer source is recomputed") {
    const fs::path src = dir / "t" / tempo[1].path;
    fs::last_write_time(src, stamps[tempo[1].id] + std::chrono::seconds(5));
    REQUIRE(cli(tempo_args).code == 0);
    CHECK(fs::last_write_time(cache_path((dir / "tc").string(), tempo[1])) != stamps[tempo[1].id]);
    CHECK(fs::last_write_time(cache_path((dir / "tc").string(), tempo[0])) == stamps[tempo[0].id]);
  }
  SECTION("failures are reported and the run continues") {
    fs::remove_all(dir / "tc");
    fs::remove(dir / "t" / tempo[0].path);
    CHECK(cli(tempo_args).code == 2);
    CHECK_FALSE(fs::exists(cache_path((dir / "tc").string(), tempo[0])));
    CHECK(fs::exists(cache_path((dir / "tc").string(), tempo[1])));
    CHECK(fs::exists(cache_path((dir / "tc").string(), tempo[2])));
  }
  SECTION("missing manifest") {
    CHECK(cli("preprocess --manifest " + q(dir / "none.csv") + " --cache-dir " + q(dir / "x"))
              .code == 2);
  }
}

TEST_CASE("evaluate a constant class-0 model", "[cli]") {
  const auto dir = fresh_dir("evaluate");
  SECTION("tempo") {
    // Class 0 decodes to 30 BPM; only the two 30 BPM references count.
    std::vector<ManifestEntry> entries;
    const std::vector<int> labels = {30, 100, 30, 120};
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const std::string id = "t" + std::to_string(i);
      write_spectrogram_cache((dir / (id + ".tksp")).string(), noise_spectrogram(Task::tempo, 300, i));
      entries.push_back({id, id + ".tksp", std::to_string(labels[i]), i < 2 ? "a" : "b",
                         tempo_to_class(labels[i])});
    }
    entries[3].dataset = "a";
    write_manifest((dir / "m.csv").string(), entries);
    save_class0_model(Task::tempo, "shallow-temp", dir / "w.tkw");
    const auto r = cli("evaluate --weights " + q(dir / "w.tkw") + " --manifest " +
                       q(dir / "m.csv") + " --predictions " + q(dir / "p.csv"));
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["a"]["n"] == 3);
    CHECK(j["a"]["accuracy1"].get<double>() == Catch::Approx(1.0 / 3));
    CHECK(j["a"]["accuracy2"].get<double>() == Catch::Approx(1.0 / 3));
    CHECK(j["b"]["n"] == 1);
    CHECK(j["b"]["accuracy1"].get<double>() == 1.0);
    const std::string csv = slurp(dir / "p.csv");
    CHECK(csv.rfind("id,dataset,predicted,reference,probability\nt0,a,30,30,", 0) == 0);

    const auto pred = cli("predict --weights " + q(dir / "w.tkw") + " " + q(dir / "t1.tksp"));
    CHECK(pred.code == 0);
    CHECK(pred.out.find("\nt1,,30,,") != std::string::npos);

    CHECK(cli("evaluate --task key --weights " + q(dir / "w.tkw") + " --manifest " +
              q(dir / "m.csv"))
              .code == 1);
  }
  SECTION("key") {
    std::vector<ManifestEntry> entries;
    const std::vector<std::size_t> classes = {0, 0, 0, 5, 13};
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const std::string id = "k" + std::to_string(i);
      write_spectrogram_cache((dir / (id + ".tksp")).string(), noise_spectrogram(Task::key, 80, i));
      entries.push_back({id, id + ".tksp", format_label(classes[i], Task::key), "keys", classes[i]});
    }
    write_manifest((dir / "m.csv").string(), entries);
    save_class0_model(Task::key, "deep-square", dir / "w.tkw");
    const auto r = cli("evaluate --weights " + q(dir / "w.tkw") + " --manifest " +
                       q(dir / "m.csv") + " --out " + q(dir / "metrics.json"));
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(dir / "metrics.json"));
    CHECK(j["keys"]["key_accuracy"].get<double>() == Catch::Approx(0.6));
  }
  SECTION("data errors") {
    save_class0_model(Task::tempo, "shallow-temp", dir / "w.tkw");
    write_text(dir / "m.csv", "id,path,label,dataset\nx,missing.wav,100,a\n");
    CHECK(cli("evaluate --weights " + q(dir / "w.tkw") + " --manifest " + q(dir / "m.csv")).code ==
          2);
    CHECK(cli("evaluate --weights " + q(dir / "none.tkw") + " --manifest " + q(dir / "m.csv"))
              .code == 2);
    write_text(dir / "junk.tkw", "not a weight file");
    CHECK(cli("predict --weights " + q(dir / "junk.tkw") + " x.wav").code == 2);
  }
}

TEST_CASE("train", "[cli][slow]") {
  const auto dir = fresh_dir("train");
  REQUIRE(cli("synth --task tempo --count 8 --seconds 16 --seed 2 --out " + q(dir / "c")).code ==
          0);
  const std::string base = "train --manifest " + q(dir / "c" / "manifest.csv") +
                           " --task tempo --arch shallow-temp,deep-temp --k 1 --dropout 0.3 "
                           "--runs 2 --epochs 2 --split 0.5,0.25,0.25 --seed 11 --out ";
  REQUIRE(cli(base + q(dir / "o1")).code == 0);
  REQUIRE(cli(base + q(dir / "o2")).code == 0);
  const std::string report = slurp(dir / "o1" / "report.jsonl");
  CHECK(report == slurp(dir / "o2" / "report.jsonl"));

  std::istringstream lines(report);
  std::string line;
  std::size_t epochs = 0, runs = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "epoch") {
      ++epochs;
    } else {
      ++runs;
      CHECK(j["epochs"] == 2);
      CHECK(j["test_accs"].contains("synth"));
      const auto w = load_weights<float>((dir / "o1" / j["weights"].get<std::string>()).string());
      CHECK(arch_name(w.arch()) == j["arch"].get<std::string>());
    }
  }
  CHECK(epochs == 8);
  CHECK(runs == 4);
  const auto summary = nlohmann::json::parse(slurp(dir / "o1" / "summary.json"));
  CHECK(summary["variants"].size() == 2);
  CHECK(summary["n_train"] == 4);

  CHECK(cli(base + q(dir / "o3") + " --dropout 1.5").code == 1);
  CHECK(cli(base + q(dir / "o3") + " --split 0.9,0.2,0.1").code == 1);
  CHECK(cli("train --manifest " + q(dir / "none.csv") + " --arch deep-temp --out " +
            q(dir / "o3"))
            .code == 2);
}

TEST_CASE("divergence exits with 3", "[cli]") {
  const auto dir = fresh_dir("numeric");
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string id = "n" + std::to_string(i);
    auto s = noise_spectrogram(Task::tempo, 330, i);
    if (i == 0) std::fill(s.values.values.begin(), s.values.values.end(), NAN);
    write_spectrogram_cache((dir / (id + ".tksp")).string(), s);
    entries.push_back({id, id + ".tksp", "100", "a", tempo_to_class(100)});
  }
  write_manifest((dir / "m.csv").string(), entries);
  // Split seed 0 puts the poisoned track in training; checked below.
  const auto parts = split(entries, SplitSpec{{0.5, 0.5, 0.0}, {}, 0});
  REQUIRE(std::any_of(parts.train.begin(), parts.train.end(),
                      [](const ManifestEntry& e) { return e.id == "n0"; }));
  CHECK(cli("train --manifest " + q(dir / "m.csv") +
            " --arch shallow-temp --dropout 0 --runs 1 --epochs 2 --split 0.5,0.5,0 --out " +
            q(dir / "o"))
            .code == 3);
}
