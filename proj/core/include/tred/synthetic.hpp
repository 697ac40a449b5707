#pragma once

// Procedural stand-ins for the datasets the toolkit is exercised on.
//
// The image universe has 30 classes, one per (shape, texture) pair, rendered
// with random colours, positions and cluttered backgrounds. Source and target
// tasks take disjoint class subsets of it.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/types.h>

#include "tred/data.hpp"

namespace tred {

inline constexpr int kShapeCount = 6;
inline constexpr int kTextureCount = 5;
inline constexpr int kUniverseClasses = kShapeCount * kTextureCount;

/// Ten universe classes covering every shape and texture.
inline constexpr std::array<int, 10> kSourceClassIds{0, 6, 12, 18, 24, 5, 11, 17, 23, 29};

/// The 20 universe classes not in kSourceClassIds, ascending.
std::vector<int> target_class_ids();

std::string universe_class_name(int id);

struct SyntheticImageSpec {
  std::vector<int> class_ids;   // universe ids; labels follow this order
  int64_t images_per_class = 100;
  int64_t image_size = 40;
  double clutter = 0.5;         // 0 = plain background, 1 = heavy distractors
  double pixel_noise = 8.0;     // gaussian std in 0..255 units
  uint64_t seed = 0;
};

/// Deterministic given the spec. Manifest paths are "<class>/<index>.ppm".
LabeledImages generate_shape_texture_images(const SyntheticImageSpec& spec);

/// Writes images to root/<class>/<file> so load_dataset can read them back.
void write_class_directory(const LabeledImages& data, const std::filesystem::path& root);

struct SeparableFeatureSpec {
  int64_t examples = 512;
  int64_t channels = 8;
  int64_t height = 4;
  int64_t width = 4;
  std::vector<int64_t> signal_channels{0, 1};
  double signal = 2.0;
  uint64_t seed = 0;
};

/// Two-class feature maps (N, C, H, W) whose class signal lives only in the
/// signal channels (left half vs right half activation); the other channels
/// carry class-independent blobs plus unit noise.
TensorDataset make_separable_feature_dataset(const SeparableFeatureSpec& spec);

}  // namespace tred
