#pragma once

// Finite-difference checks of every differentiable loss on small random
// double tensors. Shared by the unit tests and the acceptance binary.

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "oracles.hpp"
#include "tred/disentangler.hpp"
#include "tred/features.hpp"
#include "tred/mmd.hpp"
#include "tred/regularizers.hpp"

namespace oracle {

struct GradientCase {
  std::string name;
  double error = 0.0;  // norm-wise relative error
};

// (rows, cols) matrix with singular values exactly `sigmas`.
inline torch::Tensor matrix_with_spectrum(int64_t rows, int64_t cols, const std::vector<double>& sigmas,
                                          uint64_t seed) {
  auto u = std::get<0>(torch::linalg_qr(randn({rows, rows}, seed)));
  auto v = std::get<0>(torch::linalg_qr(randn({cols, cols}, seed + 1)));
  auto s = torch::zeros({rows, cols}, torch::kDouble);
  for (size_t i = 0; i < sigmas.size(); ++i) s[static_cast<int64_t>(i)][static_cast<int64_t>(i)] = sigmas[i];
  return u.matmul(s).matmul(v.t());
}

inline std::vector<GradientCase> run_gradient_suite(uint64_t seed, double step = 1e-4) {
  using tred::FeatureMap;
  std::vector<GradientCase> out;
  const std::vector<int64_t> shape{3, 4, 3, 3};
  auto base = randn(shape, seed);
  auto other = randn(shape, seed + 1);

  {
    // Bandwidth frozen at the median heuristic of the base point.
    const auto neg_desc = tred::reduce_channelwise(FeatureMap(other));
    const double sigma = tred::resolve_bandwidth(tred::reduce_channelwise(FeatureMap(base)).data(),
                                                 neg_desc.data(), tred::KernelConfig{});
    const auto fixed = tred::KernelConfig::fixed(sigma);
    out.push_back({"L_di", gradient_check(
                               [&](const torch::Tensor& x) {
                                 return tred::mmd_exp_loss(tred::reduce_channelwise(FeatureMap(x)), neg_desc, 1.0,
                                                           fixed);
                               },
                               base, step)});
  }
  {
    auto ori = randn(shape, seed + 2);
    out.push_back({"L_re", gradient_check(
                               [&](const torch::Tensor& x) {
                                 return tred::reconstruction_loss(FeatureMap(x), FeatureMap(other), FeatureMap(ori),
                                                                  1.0);
                               },
                               base, step)});
  }
  {
    tred::AuxClassifier clf(shape[1], 3, seed + 3);
    clf->to(torch::kDouble);
    auto labels = torch::tensor({0, 2, 1}, torch::kLong);
    out.push_back({"L_ce", gradient_check(
                               [&](const torch::Tensor& x) {
                                 return tred::positive_ce_loss(FeatureMap(x), labels, clf, 1.0);
                               },
                               base, step)});
  }
  out.push_back({"AT", gradient_check([&](const torch::Tensor& x) {
                   return tred::at_penalty(FeatureMap(x), FeatureMap(other), 1.0);
                 },
                                      base, step)});
  {
    tred::ChannelWeights w{{0.1, 0.2, 0.3, 0.4}, {}, {}};
    out.push_back({"DELTA", gradient_check([&](const torch::Tensor& x) {
                     return tred::delta_penalty(FeatureMap(x), FeatureMap(other), w, 1.0);
                   },
                                           base, step)});
  }
  {
    auto a = matrix_with_spectrum(6, 5, {9.0, 7.0, 5.0, 3.0, 1.0}, seed + 4);
    out.push_back({"BSS", gradient_check([&](const torch::Tensor& x) {
                     return tred::bss_penalty(tred::FeatureMatrix(x), 2, 1.0);
                   },
                                         a, step)});
  }
  out.push_back({"TRED", gradient_check([&](const torch::Tensor& x) {
                   return tred::tred_penalty(FeatureMap(x), FeatureMap(other), 1.0);
                 },
                                        base, step)});
  return out;
}

}  // namespace oracle
