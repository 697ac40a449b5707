#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/types.h>

namespace tred {

/// 8-bit RGB image, row-major, interleaved.
struct Image {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> rgb;

  Image() = default;
  Image(int64_t w, int64_t h) : width(w), height(h), rgb(static_cast<size_t>(w * h * 3), 0) {}

  uint8_t* at(int64_t x, int64_t y) { return rgb.data() + (y * width + x) * 3; }
  const uint8_t* at(int64_t x, int64_t y) const { return rgb.data() + (y * width + x) * 3; }
  bool empty() const { return width < 1 || height < 1; }
};

/// Decodes binary PPM (P6) or PNG, chosen by file signature. Throws InvalidInput
/// on unreadable or unsupported files.
Image read_image(const std::filesystem::path& path);

/// Encoding chosen by extension: ".png" or ".ppm".
void write_image(const Image& image, const std::filesystem::path& path);

/// (3, H, W) float tensor with values in [0, 1].
torch::Tensor image_to_tensor(const Image& image);

/// Inverse of image_to_tensor; values are clamped to [0, 1] and rounded.
Image tensor_to_image(const torch::Tensor& chw);

}  // namespace tred
