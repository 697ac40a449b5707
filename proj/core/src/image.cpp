#include "tred/image.hpp"

#include <png.h>

#include <array>
#include <cstdio>
#include <cctype>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include <torch/torch.h>

#include "tred/error.hpp"

namespace tred {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Skips whitespace and '#' comments in a PPM header, then reads an integer.
bool read_ppm_int(std::istream& in, int64_t& value) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  return static_cast<bool>(in >> value);
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  in >> magic;
  int64_t w = 0, h = 0, maxval = 0;
  if (magic != "P6" || !read_ppm_int(in, w) || !read_ppm_int(in, h) || !read_ppm_int(in, maxval) ||
      w < 1 || h < 1 || maxval != 255) {
    throw InvalidInput("unsupported or corrupt PPM: " + path.string());
  }
  in.get();
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw InvalidInput("truncated PPM: " + path.string());
  }
  return img;
}

Image read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw InvalidInput("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Image img(image.width, image.height);
  if (png_image_finish_read(&image, nullptr, img.rgb.data(), 0, nullptr) == 0) {
    std::string msg = image.message;
    png_image_free(&image);
    throw InvalidInput("cannot decode PNG " + path.string() + ": " + msg);
  }
  return img;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (png_image_write_to_file(&image, path.c_str(), 0, img.rgb.data(), 0, nullptr) == 0) {
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
  }
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  std::array<unsigned char, 8> sig{};
  {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw InvalidInput("cannot open image: " + path.string());
    if (std::fread(sig.data(), 1, sig.size(), f.get()) < 2) {
      throw InvalidInput("image too short: " + path.string());
    }
  }
  if (sig[0] == 'P' && sig[1] == '6') return read_ppm(path);
  if (png_sig_cmp(sig.data(), 0, sig.size()) == 0) return read_png(path);
  throw InvalidInput("unsupported image format: " + path.string());
}

void write_image(const Image& image, const std::filesystem::path& path) {
  if (image.empty()) throw InvalidInput("write_image: empty image");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (path.extension() == ".png") {
    write_png(image, path);
  } else if (path.extension() == ".ppm") {
    write_ppm(image, path);
  } else {
    throw InvalidInput("write_image: unsupported extension " + path.extension().string());
  }
}

torch::Tensor image_to_tensor(const Image& image) {
  if (image.empty()) throw InvalidInput("image_to_tensor: image smaller than 1px");
  auto hwc = torch::from_blob(const_cast<uint8_t*>(image.rgb.data()),
                              {image.height, image.width, 3}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

Image tensor_to_image(const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) throw InvalidInput("tensor_to_image: expected (3, H, W)");
  auto hwc = chw.detach()
                 .to(torch::kFloat)
                 .clamp(0.0, 1.0)
                 .mul(255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  Image img(chw.size(2), chw.size(1));
  std::memcpy(img.rgb.data(), hwc.data_ptr<uint8_t>(), img.rgb.size());
  return img;
}

}  // namespace tred
