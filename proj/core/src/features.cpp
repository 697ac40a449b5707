#include "tred/features.hpp"

#include <sstream>

#include <torch/torch.h>

#include "tred/error.hpp"

namespace tred {

namespace {

std::string shape_string(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

void require_rank(const torch::Tensor& t, int64_t rank, const char* what) {
  if (!t.defined()) throw InvalidInput(std::string(what) + ": undefined tensor");
  if (t.dim() != rank) {
    throw InvalidInput(std::string(what) + ": expected rank " + std::to_string(rank) +
                       ", got shape " + shape_string(t));
  }
  for (auto s : t.sizes()) {
    if (s < 1) throw InvalidInput(std::string(what) + ": empty extent in " + shape_string(t));
  }
  if (!all_finite(t)) throw InvalidInput(std::string(what) + ": non-finite entries");
}

}  // namespace

bool all_finite(const torch::Tensor& t) {
  torch::NoGradGuard guard;
  return torch::isfinite(t).all().item<bool>();
}

FeatureMap::FeatureMap(torch::Tensor data, std::string layer_id)
    : data_(std::move(data)), layer_id_(std::move(layer_id)) {
  require_rank(data_, 4, "FeatureMap");
}

FeatureMap FeatureMap::detached() const {
  FeatureMap out;
  out.data_ = data_.detach();
  out.layer_id_ = layer_id_;
  return out;
}

ChannelDescriptor::ChannelDescriptor(torch::Tensor data) : data_(std::move(data)) {
  require_rank(data_, 2, "ChannelDescriptor");
}

SpatialDescriptor::SpatialDescriptor(torch::Tensor data) : data_(std::move(data)) {
  require_rank(data_, 2, "SpatialDescriptor");
}

FeatureMatrix::FeatureMatrix(torch::Tensor data) : data_(std::move(data)) {
  require_rank(data_, 2, "FeatureMatrix");
}

void require_same_shape(const FeatureMap& a, const FeatureMap& b) {
  if (a.data().sizes() != b.data().sizes()) {
    throw ShapeMismatch("feature maps differ in shape: " + shape_string(a.data()) + " vs " +
                        shape_string(b.data()));
  }
}

ChannelDescriptor reduce_spatialwise(const FeatureMap& fm) {
  return ChannelDescriptor(fm.data().mean({2, 3}));
}

SpatialDescriptor reduce_channelwise(const FeatureMap& fm, ChannelReduction mode) {
  auto reduced = mode == ChannelReduction::kMean ? fm.data().mean(1) : fm.data().sum(1);
  return SpatialDescriptor(reduced.reshape({fm.batch(), fm.height() * fm.width()}));
}

SpatialDescriptor attention_map(const FeatureMap& fm) {
  auto energy = fm.data().pow(2).sum(1).reshape({fm.batch(), fm.height() * fm.width()});
  auto norm = energy.norm(2, {1}, /*keepdim=*/true);
  // Zero maps divide by one so they stay zero and keep a finite gradient.
  auto safe = torch::where(norm > 0, norm, torch::ones_like(norm));
  return SpatialDescriptor(energy / safe);
}

FeatureMatrix flatten_features(const FeatureMap& fm) {
  return FeatureMatrix(fm.data().reshape({fm.batch(), -1}));
}

FeatureMap unflatten_features(const FeatureMatrix& m, int64_t channels, int64_t height,
                              int64_t width, std::string layer_id) {
  if (m.cols() != channels * height * width) {
    throw ShapeMismatch("cannot unflatten " + shape_string(m.data()) + " into C*H*W = " +
                        std::to_string(channels * height * width));
  }
  return FeatureMap(m.data().reshape({m.rows(), channels, height, width}), std::move(layer_id));
}

}  // namespace tred
