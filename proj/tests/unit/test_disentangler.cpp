#include <doctest.h>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "tred/backbone.hpp"
#include "tred/disentangler.hpp"
#include "tred/error.hpp"
#include "tred/synthetic.hpp"

using namespace tred;

namespace {

DisentanglerConfig small_config(int64_t channels = 4, uint64_t seed = 3) {
  DisentanglerConfig cfg;
  cfg.channels = channels;
  cfg.layer_id = "input";
  cfg.seed = seed;
  return cfg;
}

ModelAdapter identity_source(int64_t channels, int64_t classes) {
  BackboneSpec spec;
  spec.architecture = "identity";
  spec.in_channels = channels;
  spec.num_classes = classes;
  spec.transfer_layer_id = "input";
  return build_backbone(spec);
}

}  // namespace

TEST_SUITE("disentangler") {
  TEST_CASE("disentangle preserves shape and is deterministic") {
    DisentanglerState state(small_config());
    for (auto shape : {std::vector<int64_t>{2, 4, 3, 3}, std::vector<int64_t>{1, 4, 1, 1}, std::vector<int64_t>{5, 4, 2, 7}}) {
      FeatureMap x(oracle::randn(shape, 1, torch::kFloat));
      auto [p1, n1] = disentangle(x, state);
      auto [p2, n2] = disentangle(x, state);
      CHECK(p1.data().sizes() == x.data().sizes());
      CHECK(n1.data().sizes() == x.data().sizes());
      CHECK(torch::equal(p1.data(), p2.data()));
      CHECK(torch::equal(n1.data(), n2.data()));
    }
    CHECK_THROWS_AS(disentangle(FeatureMap(torch::zeros({1, 3, 2, 2})), state), ShapeMismatch);
  }

  TEST_CASE("fresh disentangler does not reconstruct") {
    DisentanglerState state(small_config());
    FeatureMap x(oracle::randn({4, 4, 3, 3}, 2, torch::kFloat));
    auto [p, n] = disentangle(x, state);
    CHECK(reconstruction_loss(p, n, x, 1.0).item<double>() > 0.0);
  }

  TEST_CASE("reconstruction_loss examples") {
    auto ori = oracle::randn({3, 2, 2, 2}, 4);
    auto pos = oracle::randn({3, 2, 2, 2}, 5);
    CHECK(reconstruction_loss(FeatureMap(pos), FeatureMap(ori - pos), FeatureMap(ori), 1.0).item<double>() ==
          doctest::Approx(0.0).epsilon(1e-12));
    CHECK(reconstruction_loss(FeatureMap(ori), FeatureMap(torch::zeros_like(ori)), FeatureMap(ori), 1.0)
              .item<double>() == 0.0);
    auto ones = torch::ones({1, 1, 1, 2}, torch::kDouble);
    CHECK(reconstruction_loss(FeatureMap(ones), FeatureMap(ones), FeatureMap(torch::zeros_like(ones)), 1.0)
              .item<double>() == doctest::Approx(8.0));
    // Batch mean: duplicating the batch leaves the value unchanged.
    auto twice = torch::cat({ones, ones});
    CHECK(reconstruction_loss(FeatureMap(twice), FeatureMap(twice), FeatureMap(torch::zeros_like(twice)), 1.0)
              .item<double>() == doctest::Approx(8.0));
    CHECK_THROWS_AS(reconstruction_loss(FeatureMap(ones), FeatureMap(torch::ones({1, 1, 2, 1})), FeatureMap(ones), 1.0),
                    ShapeMismatch);
  }

  TEST_CASE("positive_ce_loss examples") {
    AuxClassifier clf(2, 3, 0);
    {
      torch::NoGradGuard g;
      for (auto& p : clf->parameters()) p.zero_();
    }
    auto pos = FeatureMap(oracle::randn({4, 2, 2, 2}, 6, torch::kFloat));
    auto labels = torch::tensor({0, 1, 2, 1}, torch::kLong);
    CHECK(positive_ce_loss(pos, labels, clf, 0.5).item<double>() == doctest::Approx(0.5 * std::log(3.0)).epsilon(1e-6));
    CHECK(positive_ce_loss(pos, labels, clf, 0.0).item<double>() == 0.0);
    CHECK_THROWS_AS(positive_ce_loss(pos, torch::tensor({0, 1, 3, 1}, torch::kLong), clf, 1.0), InvalidInput);

    // K=2 with logits [ln 3, 0]: a 1-channel 1x1 map of value 1 through
    // weight [ln 3, 0] and zero bias.
    AuxClassifier two(1, 2, 0);
    {
      torch::NoGradGuard g;
      for (auto& item : two->named_parameters()) {
        auto& p = item.value();
        if (item.key().find("weight") != std::string::npos) {
          p.copy_(torch::tensor({std::log(3.0), 0.0}).reshape({2, 1}));
        } else {
          p.zero_();
        }
      }
    }
    auto one = FeatureMap(torch::ones({1, 1, 1, 1}));
    CHECK(positive_ce_loss(one, torch::tensor({0}, torch::kLong), two, 1.0).item<double>() ==
          doctest::Approx(-std::log(0.75)).epsilon(1e-6));
  }

  TEST_CASE("total loss is additive and vanishes with zero weights") {
    auto source = identity_source(4, 2);
    auto cfg = small_config();
    DisentanglerState state(cfg);
    AuxClassifier clf(4, 2, 1);
    Batch batch{oracle::randn({6, 4, 3, 3}, 7, torch::kFloat), torch::tensor({0, 1, 0, 1, 1, 0}, torch::kLong)};
    auto l = disentangler_total_loss(batch, source, state, clf, {});
    CHECK(l.total.item<double>() ==
          doctest::Approx(l.di.item<double>() + l.re.item<double>() + l.ce.item<double>()).epsilon(1e-6));
    CHECK(cfg.weights.di == 1e-2);
    CHECK(cfg.weights.re == 1e-2);
    CHECK(cfg.weights.ce == 1e-3);

    cfg.weights = {0.0, 0.0, 0.0};
    DisentanglerState off(cfg);
    CHECK(disentangler_total_loss(batch, source, off, clf, {}).total.item<double>() == 0.0);
    CHECK(off.mmd_ablated());
  }

  TEST_CASE("training on the separable set separates parts and keeps the source frozen") {
    SeparableFeatureSpec spec;
    auto data = make_separable_feature_dataset(spec);
    auto source = identity_source(spec.channels, 2);
    const auto source_hash = source.parameter_hash();
    DisentanglerState state(small_config(spec.channels, 11));
    AuxClassifier clf(spec.channels, 2, 12);
    DisentanglerSchedule schedule;
    schedule.seed = 13;
    auto curve = train_disentangler(data, source, state, clf, schedule);
    REQUIRE(curve.epochs.size() == 5);
    const auto& last = curve.epochs.back();
    CHECK(last.mmd2 > curve.initial.mmd2);
    CHECK(last.re <= 0.5 * curve.initial.re);
    CHECK(last.ce < curve.initial.ce);
    for (const auto& e : curve.epochs) {
      CHECK(std::isfinite(e.total));
      CHECK(e.di >= 0.0);
      CHECK(e.re >= 0.0);
      CHECK(e.ce >= 0.0);
    }
    CHECK(source.parameter_hash() == source_hash);
  }

  TEST_CASE("ablated training runs and is flagged") {
    SeparableFeatureSpec spec;
    spec.examples = 128;
    auto data = make_separable_feature_dataset(spec);
    auto source = identity_source(spec.channels, 2);
    auto cfg = small_config(spec.channels, 1);
    cfg.weights.di = 0.0;
    DisentanglerState state(cfg);
    AuxClassifier clf(spec.channels, 2, 2);
    DisentanglerSchedule schedule;
    schedule.epochs = 1;
    auto curve = train_disentangler(data, source, state, clf, schedule);
    CHECK(curve.epochs.size() == 1);
    CHECK(state.mmd_ablated());
  }

  TEST_CASE("empty dataset is rejected") {
    auto source = identity_source(4, 2);
    DisentanglerState state(small_config());
    AuxClassifier clf(4, 2, 0);
    TensorDataset empty;
    CHECK_THROWS_AS(train_disentangler(empty, source, state, clf, {}), InvalidInput);
  }

  TEST_CASE("checkpoint round trip and deterministic manifest") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "tred_dis_test";
    fs::remove_all(dir);
    SeparableFeatureSpec spec;
    spec.examples = 64;
    auto data = make_separable_feature_dataset(spec);
    auto source = identity_source(spec.channels, 2);
    std::string manifests[2];
    for (int run = 0; run < 2; ++run) {
      DisentanglerState state(small_config(spec.channels, 5));
      AuxClassifier clf(spec.channels, 2, 6);
      DisentanglerSchedule schedule;
      schedule.epochs = 2;
      schedule.seed = 7;
      auto curve = train_disentangler(data, source, state, clf, schedule);
      const fs::path path = dir / ("dis" + std::to_string(run) + ".pt");
      save_disentangler(state, path, curve, schedule.epochs);
      std::ifstream in(path.string() + ".json");
      manifests[run] = std::string(std::istreambuf_iterator<char>(in), {});
      auto loaded = load_disentangler(path);
      CHECK(loaded.parameter_hash() == state.parameter_hash());
      CHECK(loaded.config.to_json() == state.config.to_json());
    }
    CHECK(manifests[0] == manifests[1]);
    auto j = nlohmann::json::parse(manifests[0]);
    CHECK(j.at("lambda_di").get<double>() == 1e-2);
    CHECK(j.at("lambda_re").get<double>() == 1e-2);
    CHECK(j.at("lambda_ce").get<double>() == 1e-3);
    CHECK(j.contains("content_hash"));
    CHECK_THROWS_AS(load_disentangler(dir / "missing.pt"), MissingArtifact);
    fs::remove_all(dir);
  }
}
