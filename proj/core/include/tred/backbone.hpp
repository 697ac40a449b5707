#pragma once

// Concrete differentiable backbones behind the ModelAdapter handle, plus
// desk-scale source pretraining.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "tred/features.hpp"

namespace tred {

struct BackboneSpec {
  /// "resnet_small" (residual net for 32x32 inputs) or "identity" (the input
  /// itself is the transfer-layer feature map; only a pooled linear head).
  std::string architecture = "resnet_small";
  std::vector<int64_t> widths{16, 32, 64, 128};
  std::vector<int64_t> blocks{2, 2, 2, 2};
  int64_t in_channels = 3;
  int64_t num_classes = 10;
  /// "stem", "stage1" ... "stageN"; defaults to the last stage.
  std::string transfer_layer_id = "stage4";
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static BackboneSpec from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct ForwardOutput {
  torch::Tensor logits;
  FeatureMap features;  // transfer-layer activations
};

/// Network with a representation part and a task head.
class BackboneNet : public torch::nn::Module {
 public:
  virtual ForwardOutput forward(const torch::Tensor& x) = 0;
  /// Logits from transfer-layer activations (the part after the transfer layer).
  virtual torch::Tensor head_forward(const torch::Tensor& features) = 0;
  virtual std::vector<torch::Tensor> backbone_parameters() = 0;
  virtual std::vector<torch::Tensor> head_parameters() = 0;
  virtual int64_t transfer_channels() const = 0;
};

/// Handle to a backbone: parameters partitioned into (backbone, head), a
/// transfer-layer feature map and logits.
class ModelAdapter {
 public:
  ModelAdapter() = default;
  ModelAdapter(BackboneSpec spec, std::shared_ptr<BackboneNet> net);

  ForwardOutput forward(const torch::Tensor& x) const { return net_->forward(x); }

  const BackboneSpec& spec() const { return spec_; }
  int64_t num_classes() const { return spec_.num_classes; }
  int64_t transfer_channels() const { return net_->transfer_channels(); }
  const std::string& transfer_layer_id() const { return spec_.transfer_layer_id; }
  BackboneNet& net() const { return *net_; }
  bool valid() const { return static_cast<bool>(net_); }

  std::vector<torch::Tensor> parameters() const;
  std::vector<torch::Tensor> backbone_parameters() const { return net_->backbone_parameters(); }
  std::vector<torch::Tensor> head_parameters() const { return net_->head_parameters(); }

  void train(bool on = true) const { net_->train(on); }
  void eval() const { net_->eval(); }
  /// Eval mode and no parameter requires grad.
  void freeze() const;
  void set_backbone_trainable(bool on) const;

  /// Independent deep copy.
  ModelAdapter clone() const;
  /// Deep copy with a freshly initialised head for num_classes classes.
  ModelAdapter with_fresh_head(int64_t num_classes, uint64_t seed) const;

  /// Hash over every parameter and buffer.
  std::string parameter_hash() const;

  /// Writes weights to path and a JSON manifest to path + ".json".
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static ModelAdapter load(const std::filesystem::path& path);

 private:
  BackboneSpec spec_;
  std::shared_ptr<BackboneNet> net_;
};

/// Builds the architecture named in spec with weights drawn from spec.seed.
ModelAdapter build_backbone(const BackboneSpec& spec);

/// Copies every parameter and buffer whose name and shape match.
void copy_matching_state(const BackboneNet& from, BackboneNet& to, bool include_head);

}  // namespace tred
