#pragma once

// Feature-map tensor semantics: the rank-4 activation type, the spatial and
// channel reductions used by the disentanglement losses, attention maps and
// matrix flattening for spectral analysis.
//
// All functions are pure and differentiable through libtorch autograd.

#include <cstdint>
#include <string>

#include <torch/types.h>

namespace tred {

/// Activation tensor of shape (B, C, H, W) produced by a named layer.
///
/// Construction validates rank, non-empty extents and finiteness.
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(torch::Tensor data, std::string layer_id = {});

  const torch::Tensor& data() const { return data_; }
  const std::string& layer_id() const { return layer_id_; }

  int64_t batch() const { return data_.size(0); }
  int64_t channels() const { return data_.size(1); }
  int64_t height() const { return data_.size(2); }
  int64_t width() const { return data_.size(3); }
  bool defined() const { return data_.defined(); }

  /// Same layer id, gradient history cut.
  FeatureMap detached() const;

 private:
  torch::Tensor data_;
  std::string layer_id_;
};

/// Per-channel summary (B, C).
class ChannelDescriptor {
 public:
  ChannelDescriptor() = default;
  explicit ChannelDescriptor(torch::Tensor data);
  const torch::Tensor& data() const { return data_; }

 private:
  torch::Tensor data_;
};

/// Per-location summary (B, H*W), locations flattened row-major (h then w).
class SpatialDescriptor {
 public:
  SpatialDescriptor() = default;
  explicit SpatialDescriptor(torch::Tensor data);
  const torch::Tensor& data() const { return data_; }

 private:
  torch::Tensor data_;
};

/// Batch feature matrix (b, d), one row per example.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  explicit FeatureMatrix(torch::Tensor data);
  const torch::Tensor& data() const { return data_; }
  int64_t rows() const { return data_.size(0); }
  int64_t cols() const { return data_.size(1); }

 private:
  torch::Tensor data_;
};

/// How reduce_channelwise aggregates channels.
enum class ChannelReduction { kMean, kSum };

/// Throws ShapeMismatch unless both maps have identical shapes.
void require_same_shape(const FeatureMap& a, const FeatureMap& b);

/// Mean over (h, w): out[b, c].
ChannelDescriptor reduce_spatialwise(const FeatureMap& fm);

/// Mean (or sum) over c: out[b, h * W + w].
SpatialDescriptor reduce_channelwise(const FeatureMap& fm,
                                     ChannelReduction mode = ChannelReduction::kMean);

/// Channel-wise sum of squares, flattened and L2-normalised per example.
/// A zero map yields the zero vector.
SpatialDescriptor attention_map(const FeatureMap& fm);

/// Row b is fm[b] flattened row-major; shape (B, C*H*W).
FeatureMatrix flatten_features(const FeatureMap& fm);

/// Inverse of flatten_features.
FeatureMap unflatten_features(const FeatureMatrix& m, int64_t channels, int64_t height,
                              int64_t width, std::string layer_id = {});

bool all_finite(const torch::Tensor& t);

}  // namespace tred
