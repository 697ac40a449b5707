#include <doctest.h>
#include <torch/torch.h>

#include "oracles.hpp"
#include "tred/error.hpp"
#include "tred/features.hpp"

using namespace tred;

namespace {
torch::Tensor t(std::vector<double> v, std::vector<int64_t> shape) {
  return torch::tensor(v, torch::kDouble).reshape(shape);
}
}  // namespace

TEST_SUITE("features") {
  TEST_CASE("FeatureMap rejects bad input") {
    CHECK_THROWS_AS(FeatureMap(torch::zeros({2, 3})), InvalidInput);
    CHECK_THROWS_AS(FeatureMap(torch::zeros({1, 0, 2, 2})), InvalidInput);
    auto bad = torch::zeros({1, 1, 2, 2});
    bad[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(FeatureMap{bad}, InvalidInput);
    CHECK_THROWS_AS(require_same_shape(FeatureMap(torch::zeros({1, 2, 2, 2})), FeatureMap(torch::zeros({1, 2, 2, 1}))),
                    ShapeMismatch);
  }

  TEST_CASE("reduce_spatialwise examples") {
    auto ones = reduce_spatialwise(FeatureMap(torch::ones({1, 2, 2, 2}))).data();
    CHECK(torch::equal(ones, torch::ones({1, 2})));
    auto fm = torch::zeros({1, 2, 2, 2}, torch::kDouble);
    fm[0][0] = t({1, 3, 5, 7}, {2, 2});
    CHECK(reduce_spatialwise(FeatureMap(fm)).data()[0][0].item<double>() == doctest::Approx((1 + 3 + 5 + 7) / 4.0));
    CHECK(reduce_spatialwise(FeatureMap(torch::full({1, 1, 1, 1}, 9.0))).data().item<double>() == 9.0);
  }

  TEST_CASE("reduce_channelwise examples") {
    auto z = reduce_channelwise(FeatureMap(torch::zeros({1, 3, 2, 2}))).data();
    CHECK(z.sizes() == torch::IntArrayRef({1, 4}));
    CHECK(z.abs().sum().item<double>() == 0.0);
    auto two = reduce_channelwise(FeatureMap(t({2, 4}, {1, 2, 1, 1}))).data();
    CHECK(two.item<double>() == doctest::Approx(3.0));
    auto pass = reduce_channelwise(FeatureMap(t({1, 2, 3, 4}, {1, 1, 2, 2}))).data();
    CHECK(torch::equal(pass, t({1, 2, 3, 4}, {1, 4})));
    auto summed = reduce_channelwise(FeatureMap(t({2, 4}, {1, 2, 1, 1})), ChannelReduction::kSum).data();
    CHECK(summed.item<double>() == doctest::Approx(6.0));
  }

  TEST_CASE("reductions are linear") {
    auto x = oracle::randn({3, 4, 5, 2}, 1);
    auto y = oracle::randn({3, 4, 5, 2}, 2);
    const double a = 1.7, b = -0.3;
    for (int which = 0; which < 2; ++which) {
      auto f = [&](const torch::Tensor& v) {
        return which == 0 ? reduce_spatialwise(FeatureMap(v)).data() : reduce_channelwise(FeatureMap(v)).data();
      };
      auto lhs = f(a * x + b * y);
      auto rhs = a * f(x) + b * f(y);
      CHECK(((lhs - rhs).abs().max() / rhs.abs().max()).item<double>() < 1e-6);
    }
  }

  TEST_CASE("attention_map examples") {
    auto a = attention_map(FeatureMap(t({3, 4}, {1, 1, 1, 2}))).data();
    const double n = std::sqrt(81.0 + 256.0);
    CHECK(a[0][0].item<double>() == doctest::Approx(9.0 / n));
    CHECK(a[0][1].item<double>() == doctest::Approx(16.0 / n));
    CHECK(a[0][0].item<double>() == doctest::Approx(0.490).epsilon(1e-3));
    CHECK(a[0][1].item<double>() == doctest::Approx(0.872).epsilon(1e-3));

    auto zero = attention_map(FeatureMap(torch::zeros({2, 3, 2, 2}))).data();
    CHECK(zero.abs().sum().item<double>() == 0.0);

    auto x = oracle::randn({2, 3, 4, 4}, 5);
    auto s1 = attention_map(FeatureMap(x)).data();
    auto s2 = attention_map(FeatureMap(x * 3.5)).data();
    CHECK((s1 - s2).abs().max().item<double>() < 1e-12);
  }

  TEST_CASE("attention_map has unit norm for nonzero maps") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      auto a = attention_map(FeatureMap(oracle::randn({4, 5, 3, 3}, seed))).data();
      auto norms = a.pow(2).sum(1).sqrt();
      CHECK((norms - 1.0).abs().max().item<double>() < 1e-6);
    }
  }

  TEST_CASE("attention_map gradient is finite at a zero map") {
    auto x = torch::zeros({1, 2, 2, 2}, torch::kDouble).requires_grad_(true);
    attention_map(FeatureMap(x)).data().sum().backward();
    CHECK(torch::isfinite(x.grad()).all().item<bool>());
  }

  TEST_CASE("flatten_features layout and round trip") {
    CHECK(flatten_features(FeatureMap(torch::full({1, 1, 1, 1}, 7.0))).data().item<double>() == 7.0);
    auto m = flatten_features(FeatureMap(t({1, 2, 3, 4}, {2, 1, 1, 2}))).data();
    CHECK(torch::equal(m, t({1, 2, 3, 4}, {2, 2})));
    auto x = oracle::randn({3, 4, 2, 5}, 9);
    auto back = unflatten_features(flatten_features(FeatureMap(x)), 4, 2, 5).data();
    CHECK(torch::equal(back, x));
  }
}
