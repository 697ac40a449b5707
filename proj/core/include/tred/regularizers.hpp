#pragma once

// Fine-tuning regularizers behind one configuration type:
// None, L2, L2-SP, AT, DELTA, BSS and TRED.
//
// Feature penalties reduce with a batch mean so strengths transfer across
// batch sizes. Every penalty returns a differentiable scalar tensor.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "tred/backbone.hpp"
#include "tred/data.hpp"
#include "tred/features.hpp"

namespace tred {

enum class RegKind { kNone, kL2, kL2SP, kAT, kDELTA, kBSS, kTRED };

std::string to_string(RegKind kind);
/// Accepts the display names and lower-case CLI spellings ("l2sp", "l2-sp", "tred", ...).
RegKind parse_reg_kind(const std::string& name);
/// Column order of the comparison tables.
const std::vector<RegKind>& method_order();

/// Non-negative weights over channels that sum to one.
struct ChannelWeights {
  std::vector<double> w;
  std::string layer_id;
  std::string probe_hash;

  void validate() const;
  static ChannelWeights uniform(int64_t channels);
  nlohmann::json to_json() const;
  static ChannelWeights from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& file) const;
  static ChannelWeights load(const std::filesystem::path& file);
};

struct RegularizerConfig {
  RegKind kind = RegKind::kNone;
  double alpha = 0.0;  // feature / starting-point strength
  double beta = 0.0;   // head weight decay (all weights for kL2)
  int64_t k = 1;       // BSS: number of smallest singular values
  std::optional<ChannelWeights> channel_weights;  // DELTA

  void validate() const;
  nlohmann::json to_json() const;
  static RegularizerConfig from_json(const nlohmann::json& j);
};

/// (β/2) Σ ω².
torch::Tensor l2_penalty(const std::vector<torch::Tensor>& params, double beta);

/// (α/2) |ω_s - ω⁰_s|² + (β/2) |ω_head|².
torch::Tensor l2sp_penalty(const std::vector<torch::Tensor>& omega_s,
                           const std::vector<torch::Tensor>& omega_s0,
                           const std::vector<torch::Tensor>& omega_head, double alpha, double beta);

/// (α/2) mean_b |attention(target) - attention(source)|².
torch::Tensor at_penalty(const FeatureMap& fm_target, const FeatureMap& fm_source, double alpha);

/// (α/2) Σ_j W_j mean_b |target[:, j] - source[:, j]|².
torch::Tensor delta_penalty(const FeatureMap& fm_target, const FeatureMap& fm_source,
                            const ChannelWeights& weights, double alpha);

/// Singular values (descending) of a matrix; retries once with 1e-8-scaled
/// jitter when the SVD fails and throws NumericalError if that fails too.
torch::Tensor singular_values(const torch::Tensor& a);

/// α Σ of the k smallest squared singular values of the batch feature matrix.
torch::Tensor bss_penalty(const FeatureMatrix& features, int64_t k, double alpha);

/// (α/2) mean_b |target - pos|²; fm_pos is detached so nothing flows back into
/// the source model or the disentangler.
torch::Tensor tred_penalty(const FeatureMap& fm_target, const FeatureMap& fm_pos, double alpha);

struct ProbeOptions {
  int64_t iterations = 300;
  double learning_rate = 0.5;
  int64_t batch_size = 128;
};

/// Channel weights from a frozen-feature linear probe: train a softmax
/// classifier (zero-initialised, full-batch gradient descent) on the pooled
/// transfer-layer features of the probe set, measure the loss increase Δ_j
/// when channel j is zeroed, and return softmax(Δ).
ChannelWeights delta_channel_weights(const ModelAdapter& source, const TensorDataset& probe_data,
                                     uint64_t seed, const ProbeOptions& options = {});

/// The same computation from precomputed pooled features (N, C).
ChannelWeights delta_weights_from_features(const torch::Tensor& pooled, const torch::Tensor& labels,
                                           int64_t num_classes, const ProbeOptions& options = {});

}  // namespace tred
