#include "tred/mmd.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <torch/torch.h>

#include "tred/error.hpp"

namespace tred {

namespace {

void require_samples(const torch::Tensor& X, const torch::Tensor& Y) {
  if (!X.defined() || !Y.defined() || X.dim() != 2 || Y.dim() != 2) {
    throw InvalidInput("mmd: samples must be rank-2 (rows are samples)");
  }
  if (X.size(0) < 1 || Y.size(0) < 1) throw InvalidInput("mmd: empty sample set");
  if (X.size(1) != Y.size(1)) {
    throw ShapeMismatch("mmd: sample dimensions differ (" + std::to_string(X.size(1)) + " vs " +
                        std::to_string(Y.size(1)) + ")");
  }
}

// Mean of exp(-|a_i - b_j|^2 / (2 sigma^2)) over all (i, j).
torch::Tensor mean_kernel(const torch::Tensor& A, const torch::Tensor& B, double sigma) {
  auto diff = A.unsqueeze(1) - B.unsqueeze(0);
  auto sq = diff.pow(2).sum(-1);
  return torch::exp(-sq / (2.0 * sigma * sigma)).mean();
}

}  // namespace

void KernelConfig::validate() const {
  if (!(sigma > 0.0)) throw InvalidInput("KernelConfig: sigma must be positive");
  if (!(epsilon > 0.0)) throw InvalidInput("KernelConfig: epsilon must be positive");
}

KernelConfig KernelConfig::fixed(double sigma) {
  KernelConfig cfg;
  cfg.bandwidth_mode = BandwidthMode::kFixed;
  cfg.sigma = sigma;
  cfg.validate();
  return cfg;
}

double rbf_kernel(const torch::Tensor& x, const torch::Tensor& y, double sigma) {
  if (!(sigma > 0.0)) throw InvalidInput("rbf_kernel: sigma must be positive");
  if (x.numel() != y.numel()) throw ShapeMismatch("rbf_kernel: vector lengths differ");
  torch::NoGradGuard guard;
  auto d2 = (x.to(torch::kDouble).flatten() - y.to(torch::kDouble).flatten()).pow(2).sum();
  return std::exp(-d2.item<double>() / (2.0 * sigma * sigma));
}

double median_heuristic_bandwidth(const torch::Tensor& X, const torch::Tensor& Y, double eps) {
  if (!(eps > 0.0)) throw InvalidInput("median_heuristic_bandwidth: eps must be positive");
  if (X.dim() != 2 || Y.dim() != 2 || X.size(1) != Y.size(1)) {
    throw ShapeMismatch("median_heuristic_bandwidth: incompatible sample sets");
  }
  const int64_t total = X.size(0) + Y.size(0);
  if (total < 2) throw InvalidInput("median_heuristic_bandwidth: need at least 2 samples");

  torch::NoGradGuard guard;
  auto Z = torch::cat({X.detach(), Y.detach()}, 0).to(torch::kDouble).contiguous();
  auto dist = torch::cdist(Z, Z);
  auto iu = torch::triu_indices(total, total, /*offset=*/1);
  auto pairs = dist.index({iu[0], iu[1]}).contiguous();

  std::vector<double> d(pairs.data_ptr<double>(), pairs.data_ptr<double>() + pairs.numel());
  const size_t n = d.size();
  const size_t mid = n / 2;
  std::nth_element(d.begin(), d.begin() + mid, d.end());
  double median = d[mid];
  if (n % 2 == 0) {
    double lower = *std::max_element(d.begin(), d.begin() + mid);
    median = 0.5 * (median + lower);
  }
  return median < eps ? eps : median;
}

double resolve_bandwidth(const torch::Tensor& X, const torch::Tensor& Y, const KernelConfig& cfg) {
  cfg.validate();
  if (cfg.bandwidth_mode == BandwidthMode::kFixed) return cfg.sigma;
  return median_heuristic_bandwidth(X, Y, cfg.epsilon);
}

torch::Tensor mmd2(const torch::Tensor& X, const torch::Tensor& Y, const KernelConfig& cfg) {
  require_samples(X, Y);
  const double sigma = resolve_bandwidth(X, Y, cfg);
  auto x = X.to(torch::kDouble);
  auto y = Y.to(torch::kDouble);
  auto value = mean_kernel(x, x, sigma) + mean_kernel(y, y, sigma) - 2.0 * mean_kernel(x, y, sigma);
  return value.clamp_min(0.0).to(X.scalar_type());
}

torch::Tensor mmd_exp_loss(const SpatialDescriptor& pos, const SpatialDescriptor& neg,
                           double lambda_di, const KernelConfig& cfg) {
  if (lambda_di < 0.0) throw InvalidInput("mmd_exp_loss: lambda_di must be non-negative");
  if (pos.data().size(1) != neg.data().size(1)) {
    throw ShapeMismatch("mmd_exp_loss: descriptor lengths differ");
  }
  return lambda_di * torch::exp(-mmd2(pos.data(), neg.data(), cfg));
}

}  // namespace tred
