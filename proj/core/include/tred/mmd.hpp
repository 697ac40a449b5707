#pragma once

// Gaussian-RBF maximum mean discrepancy and the exponentiated
// disentanglement loss built on it.

#include <torch/types.h>

#include "tred/features.hpp"

namespace tred {

enum class BandwidthMode { kMedianHeuristic, kFixed };

struct KernelConfig {
  BandwidthMode bandwidth_mode = BandwidthMode::kMedianHeuristic;
  double sigma = 1.0;      // used when bandwidth_mode == kFixed
  double epsilon = 1e-6;   // floor for degenerate median bandwidths

  void validate() const;
  static KernelConfig fixed(double sigma);
};

/// exp(-|x - y|^2 / (2 sigma^2)) for two 1-D tensors of equal length.
double rbf_kernel(const torch::Tensor& x, const torch::Tensor& y, double sigma);

/// Median pairwise Euclidean distance over the rows of X and Y together
/// (each unordered pair of distinct rows once), floored at eps.
/// Even pair counts use the mean of the two middle distances.
double median_heuristic_bandwidth(const torch::Tensor& X, const torch::Tensor& Y, double eps);

/// Biased (V-statistic) squared MMD between the rows of X (m, d) and Y (n, d).
///
/// Returns a differentiable scalar in X's dtype, clamped at zero. Computation
/// runs in double precision. With the median heuristic the bandwidth is
/// computed from detached values and acts as a constant for gradients.
torch::Tensor mmd2(const torch::Tensor& X, const torch::Tensor& Y, const KernelConfig& cfg);

/// Bandwidth that mmd2 would use for these samples.
double resolve_bandwidth(const torch::Tensor& X, const torch::Tensor& Y, const KernelConfig& cfg);

/// lambda_di * exp(-mmd2(pos rows, neg rows)); lies in (0, lambda_di].
torch::Tensor mmd_exp_loss(const SpatialDescriptor& pos, const SpatialDescriptor& neg,
                           double lambda_di, const KernelConfig& cfg);

}  // namespace tred
