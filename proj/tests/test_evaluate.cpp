#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tempokey/evaluate.hpp"
#include "key_table.hpp"

using namespace tk;
using tk::testing::hand_score;
using tk::testing::kHandTable;

namespace {

// Head weights zeroed, head bias set: every position emits `bias` as logits.
template <typename T>
void force_head(ModelGraph<T>& model, const std::vector<T>& bias) {
  auto params = model.parameters();
  auto& w = params[params.size() - 2].value();
  auto& b = params.back().value();
  REQUIRE(b.size() == bias.size());
  for (auto& v : w.data()) v = T(0);
  for (std::size_t i = 0; i < bias.size(); ++i) b[i] = bias[i];
}

Grid ramp_grid(std::size_t rows, std::size_t cols) {
  Grid g(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < cols; ++t)
      g(r, t) = static_cast<float>(std::sin(0.3 * t + r) + 0.01 * r + 1.5);
  return g;
}

}  // namespace

TEST_CASE("accuracy1", "[evaluate][tempo]") {
  CHECK(accuracy1(120, 120));
  CHECK(accuracy1(124.8, 120));
  CHECK_FALSE(accuracy1(124.9, 120));
  CHECK(accuracy1(115.2, 120));
  CHECK_FALSE(accuracy1(115.1, 120));
  CHECK_FALSE(accuracy1(240, 120));
  CHECK_THROWS_AS(accuracy1(120, 0), RangeError);
  CHECK_THROWS_AS(accuracy1(120, -5), RangeError);

  // Monotone in |est - ref|: once false moving away, stays false.
  for (int ref = 30; ref <= 285; ref += 17) {
    bool previous = true;
    for (double d = 0; d < 0.1 * ref; d += 0.01 * ref / 7) {
      const bool up = accuracy1(ref + d, ref);
      CHECK(accuracy1(ref - d, ref) == up);
      if (!previous) CHECK_FALSE(up);
      previous = up;
    }
  }
}

TEST_CASE("accuracy2 factor set", "[evaluate][tempo]") {
  const std::vector<std::pair<double, bool>> factors = {
      {1.0 / 4, false}, {1.0 / 3, true}, {1.0 / 2, true}, {2.0 / 3, false}, {1.0, true},
      {3.0 / 2, false}, {2.0, true},     {3.0, true},     {4.0, false}};
  for (int ref : {60, 95, 120, 174}) {
    for (const auto& [f, admitted] : factors) {
      INFO("ref " << ref << " factor " << f);
      CHECK(accuracy2(ref * f, ref) == admitted);
    }
  }
  CHECK(accuracy2(240, 120));
  CHECK(accuracy2(40, 120));
  CHECK_FALSE(accuracy2(180, 120));
  CHECK(accuracy2(240 * 1.04, 120));
  CHECK_FALSE(accuracy2(240 * 1.05, 120));
  CHECK_THROWS_AS(accuracy2(120, 0), RangeError);
  for (int ref = 30; ref <= 285; ref += 5)
    for (int est = 10; est <= 900; est += 3)
      if (accuracy1(est, ref)) CHECK(accuracy2(est, ref));
}

TEST_CASE("key accuracy and weighted score", "[evaluate][key]") {
  const KeyLabel c_major{0, KeyMode::major};
  CHECK(key_accuracy(c_major, c_major));
  CHECK_FALSE(key_accuracy(parse_key("G:maj"), c_major));
  CHECK_FALSE(key_accuracy(parse_key("C:min"), c_major));
  CHECK(weighted_key_score(parse_key("G:maj"), c_major) == 0.5);
  CHECK(weighted_key_score(parse_key("A:min"), c_major) == 0.3);
  CHECK(weighted_key_score(parse_key("C:min"), c_major) == 0.2);
  CHECK(weighted_key_score(parse_key("F#:maj"), c_major) == 0.0);

  SECTION("all 576 pairs against the hand table") {
    REQUIRE(std::size(kHandTable) == 24);
    std::size_t pairs = 0;
    for (const auto& row : kHandTable) {
      const KeyLabel reference = parse_key(row.reference);
      for (std::size_t c = 0; c < kKeyClasses; ++c) {
        const KeyLabel estimate = class_to_key(c);
        INFO(key_name(estimate) << " vs " << row.reference);
        const double score = weighted_key_score(estimate, reference);
        CHECK(score == hand_score(row, estimate));
        CHECK(score >= (key_accuracy(estimate, reference) ? 1.0 : 0.0));
        CHECK((score == 1.0) == (estimate == reference));
        ++pairs;
      }
    }
    CHECK(pairs == 576);
  }
  SECTION("invalid labels") {
    CHECK_THROWS_AS(weighted_key_score({12, KeyMode::major}, c_major), RangeError);
  }
}

TEST_CASE("aggregates are means of per-item values", "[evaluate]") {
  std::vector<LabeledSample> samples;
  std::vector<Prediction> preds;
  const std::vector<std::tuple<int, int, const char*>> rows = {
      {120, 120, "a"}, {120, 240, "a"}, {100, 130, "a"}, {90, 91, "b"}, {150, 75, "b"}};
  for (const auto& [ref, est, tag] : rows) {
    samples.push_back({"t", tag, Grid(), tempo_to_class(ref)});
    preds.push_back({"t", tempo_to_class(est), {}, std::to_string(est)});
  }
  const auto m = summarize(samples, preds, Task::tempo);
  REQUIRE(m.size() == 2);
  CHECK(m.at("a").n == 3);
  CHECK(m.at("a").accuracy1 == Catch::Approx(1.0 / 3));
  CHECK(m.at("a").accuracy2 == Catch::Approx(2.0 / 3));
  CHECK(m.at("b").accuracy1 == Catch::Approx(0.5));
  CHECK(m.at("b").accuracy2 == Catch::Approx(1.0));
  CHECK(headline(m.at("b"), Task::tempo) == m.at("b").accuracy1);

  const auto j = metrics_json(m, Task::tempo);
  CHECK(j["a"]["n"] == 3);
  CHECK(j["b"].contains("accuracy2"));
  CHECK_FALSE(j["b"].contains("key_accuracy"));

  std::vector<LabeledSample> keys = {{"k1", "g", Grid(), key_to_class(parse_key("C:maj"))},
                                     {"k2", "g", Grid(), key_to_class(parse_key("A:min"))}};
  std::vector<Prediction> key_preds = {{"k1", key_to_class(parse_key("G:maj")), {}, "G major"},
                                       {"k2", key_to_class(parse_key("A:min")), {}, "A minor"}};
  const auto km = summarize(keys, key_preds, Task::key);
  CHECK(km.at("g").key_accuracy == Catch::Approx(0.5));
  CHECK(km.at("g").weighted_score == Catch::Approx(0.75));
  CHECK(metrics_json(km, Task::key)["g"].contains("weighted_score"));

  preds.pop_back();
  CHECK_THROWS_AS(summarize(samples, preds, Task::tempo), ShapeError);
}

TEST_CASE("whole-track prediction", "[evaluate][model]") {
  auto model = build_model<float>(TaskConfig::tempo(), parse_arch("shallow-temp", 1, 0.3), 4);

  SECTION("class 90 decodes to 120 BPM") {
    std::vector<float> bias(kTempoClasses, 0.0f);
    bias[90] = 5.0f;
    force_head(model, bias);
    const auto p = predict_track(model, ramp_grid(40, 400), "clip");
    CHECK(p.id == "clip");
    CHECK(p.predicted == 90);
    CHECK(p.label == "120");
  }
  SECTION("uniform distribution picks class 0") {
    force_head(model, std::vector<float>(kTempoClasses, 0.0f));
    const auto p = predict_track(model, ramp_grid(40, 300));
    for (float v : p.distribution) CHECK(v == Catch::Approx(1.0f / kTempoClasses));
    CHECK(p.predicted == 0);
    CHECK(p.label == "30");
  }
  SECTION("determinism and normalization") {
    const auto g = ramp_grid(40, 512);
    const auto a = predict_track(model, g, "x");
    const auto b = predict_track(model, g, "x");
    CHECK(a.distribution == b.distribution);
    CHECK(a.predicted == b.predicted);
    double total = 0;
    for (float v : a.distribution) total += v;
    CHECK(std::abs(total - 1.0) <= 1e-5);
    // The whole track is normalized, so scaling the input changes nothing.
    Grid scaled = g;
    for (float& v : scaled.values) v *= 7.0f;
    CHECK(predict_track(model, scaled, "x").predicted == a.predicted);
  }
  SECTION("too short or wrong height") {
    CHECK_THROWS_AS(predict_track(model, ramp_grid(40, 255)), ShapeError);
    CHECK_THROWS_AS(predict_track(model, ramp_grid(41, 300)), ShapeError);
  }
  SECTION("key tracks with 192 bins use the unshifted window") {
    auto key_model = build_model<float>(TaskConfig::key(), parse_arch("shallow-spec", 1, 0.1), 4);
    const Grid full = ramp_grid(192, 80);
    const auto a = predict_track(key_model, full);
    const auto b = predict_track(key_model, pitch_shift_crop(full, 0));
    CHECK(a.distribution == b.distribution);
    CHECK(a.distribution.size() == kKeyClasses);
  }
}

TEST_CASE("argmax takes the first maximum", "[evaluate]") {
  const std::vector<float> v = {0.1f, 0.4f, 0.4f, 0.1f};
  CHECK(argmax(v.begin(), v.end()) == 1);
}

TEST_CASE("prediction CSV", "[evaluate][io]") {
  const auto path = std::filesystem::temp_directory_path() / "tempokey-test-predictions.csv";
  std::vector<LabeledSample> samples = {{"t1", "synth", Grid(), tempo_to_class(120)}};
  std::vector<Prediction> preds = {{"t1", tempo_to_class(121), {}, "121"}};
  preds[0].distribution.assign(kTempoClasses, 0.0f);
  preds[0].distribution[tempo_to_class(121)] = 0.75f;
  write_predictions_csv(path.string(), preds, &samples, Task::tempo);
  std::ifstream in(path);
  std::stringstream text;
  text << in.rdbuf();
  CHECK(text.str() == "id,dataset,predicted,reference,probability\nt1,synth,121,120,0.75\n");
  write_predictions_csv(path.string(), preds, nullptr, Task::tempo);
  std::ifstream again(path);
  std::stringstream bare;
  bare << again.rdbuf();
  CHECK(bare.str() == "id,dataset,predicted,reference,probability\nt1,,121,,0.75\n");
  std::filesystem::remove(path);
}
