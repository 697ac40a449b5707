#pragma once

// Stage one: a two-head disentangler splits the frozen source model's
// transfer-layer feature map into a target-relevant (positive) part and an
// irrelevant (negative) part, trained jointly with an auxiliary classifier on
// the positive part.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "tred/backbone.hpp"
#include "tred/data.hpp"
#include "tred/features.hpp"
#include "tred/mmd.hpp"

namespace tred {

struct DisentanglerLossWeights {
  double di = 1e-2;  // MMD term
  double re = 1e-2;  // reconstruction term
  double ce = 1e-3;  // positive-part cross-entropy term
};

struct DisentanglerConfig {
  int64_t channels = 0;
  double hidden_ratio = 0.5;
  DisentanglerLossWeights weights;
  std::string layer_id;
  uint64_t seed = 0;

  void validate() const;
  int64_t hidden_channels() const;
  nlohmann::json to_json() const;
  static DisentanglerConfig from_json(const nlohmann::json& j);
};

/// Two independent heads over a shared input, each
/// 1x1 conv (C -> C * hidden_ratio) -> ReLU -> 1x1 conv (-> C).
class DisentanglerNetImpl : public torch::nn::Module {
 public:
  explicit DisentanglerNetImpl(const DisentanglerConfig& cfg);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& fm);

 private:
  torch::nn::Sequential positive_{nullptr};
  torch::nn::Sequential negative_{nullptr};
};
TORCH_MODULE(DisentanglerNet);

/// Global average pooling followed by one fully connected layer.
class AuxClassifierImpl : public torch::nn::Module {
 public:
  AuxClassifierImpl(int64_t channels, int64_t num_classes, uint64_t seed);
  torch::Tensor forward(const ChannelDescriptor& pooled);
  int64_t num_classes() const { return num_classes_; }

 private:
  torch::nn::Linear fc_{nullptr};
  int64_t num_classes_;
};
TORCH_MODULE(AuxClassifier);

struct DisentanglerState {
  DisentanglerConfig config;
  mutable DisentanglerNet net{nullptr};  // forward is logically const

  explicit DisentanglerState(DisentanglerConfig cfg);
  DisentanglerState(const DisentanglerState&) = delete;
  DisentanglerState& operator=(const DisentanglerState&) = delete;
  DisentanglerState(DisentanglerState&&) = default;
  DisentanglerState& operator=(DisentanglerState&&) = default;

  /// λ_di == 0: the variant trained without the MMD term.
  bool mmd_ablated() const { return config.weights.di == 0.0; }
  void freeze() const;
  std::string parameter_hash() const;
  std::vector<torch::Tensor> parameters() const { return net->parameters(); }
};

/// (FM_pos, FM_neg), both shaped like fm_ori.
std::pair<FeatureMap, FeatureMap> disentangle(const FeatureMap& fm_ori, const DisentanglerState& state);

/// λ_re * |pos + neg - ori|^2, summed over elements and averaged over the batch.
torch::Tensor reconstruction_loss(const FeatureMap& pos, const FeatureMap& neg, const FeatureMap& ori,
                                  double lambda_re);

/// λ_ce * mean cross-entropy of clf(reduce_spatialwise(pos)).
torch::Tensor positive_ce_loss(const FeatureMap& pos, const torch::Tensor& labels, AuxClassifier& clf,
                               double lambda_ce);

struct DisentanglerLosses {
  torch::Tensor di;
  torch::Tensor re;
  torch::Tensor ce;
  torch::Tensor total;
};

/// Losses from a precomputed source feature map.
DisentanglerLosses disentangler_losses(const FeatureMap& fm_ori, const torch::Tensor& labels,
                                       const DisentanglerState& state, AuxClassifier& clf,
                                       const KernelConfig& kernel);

/// Runs the frozen source on the batch (no gradient) and evaluates every term.
DisentanglerLosses disentangler_total_loss(const Batch& batch, const ModelAdapter& source,
                                           const DisentanglerState& state, AuxClassifier& clf,
                                           const KernelConfig& kernel);

struct DisentanglerSchedule {
  int64_t epochs = 5;
  int64_t batch_size = 64;
  double learning_rate = 0.01;  // Adam
  uint64_t seed = 0;
};

struct DisentanglerEpochRecord {
  int64_t epoch = 0;
  double di = 0.0;
  double re = 0.0;
  double ce = 0.0;
  double total = 0.0;
  double mmd2 = 0.0;  // mean batch mmd2(f^s_pos, f^s_neg)
};

struct DisentanglerCurve {
  DisentanglerEpochRecord initial;  // before the first update, same batches as epoch 0
  std::vector<DisentanglerEpochRecord> epochs;
  nlohmann::json to_json() const;
};

/// Per-term means over the dataset (eval batches, no updates).
DisentanglerEpochRecord measure_disentangler(const TensorDataset& data, const ModelAdapter& source,
                                             const DisentanglerState& state, AuxClassifier& clf,
                                             const KernelConfig& kernel, int64_t batch_size);

/// Minimises the stage-one objective over `data` with Adam, updating `state`
/// and `clf` in place. The source model must already be frozen and is never
/// modified. Throws DivergenceError on a non-finite loss.
DisentanglerCurve train_disentangler(const TensorDataset& data, const ModelAdapter& source,
                                     DisentanglerState& state, AuxClassifier& clf,
                                     const DisentanglerSchedule& schedule,
                                     const KernelConfig& kernel = {});

/// Weights to `path`, manifest JSON to `path` + ".json" (layer_id, channels,
/// hidden_ratio, λ's, epochs, final losses, content hash).
void save_disentangler(const DisentanglerState& state, const std::filesystem::path& path,
                       const DisentanglerCurve& curve, int64_t epochs);
DisentanglerState load_disentangler(const std::filesystem::path& path);

}  // namespace tred
