#include "tred/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "tred/error.hpp"

namespace tred {

namespace {

constexpr std::array<const char*, kShapeCount> kShapeNames{"disk",  "square", "triangle",
                                                           "ring",  "cross",  "diamond"};
constexpr std::array<const char*, kTextureCount> kTextureNames{"solid", "hstripes", "vstripes",
                                                               "checker", "dots"};

using Rgb = std::array<double, 3>;

Rgb random_colour(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 255.0);
  return {u(rng), u(rng), u(rng)};
}

// Second texture colour: pushed away from the first so patterns stay visible.
Rgb contrasting(const Rgb& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-30.0, 30.0);
  Rgb out;
  for (size_t i = 0; i < 3; ++i) out[i] = std::clamp(255.0 - c[i] + jitter(rng), 0.0, 255.0);
  return out;
}

// Point (u, v) in the object's frame (unit radius, unrotated) lies in the shape.
bool inside_shape(int shape, double u, double v) {
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return r2 <= 1.0;
    case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: return v >= -1.0 && v <= 0.75 && std::abs(u) <= (v + 1.0) / 1.75;
    case 3: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case 4: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 5: return std::abs(u) + std::abs(v) <= 1.0;
    default: return false;
  }
}

// Texture selector: true picks the first colour, false the second.
bool texture_first(int texture, double x, double y, double period, double phase) {
  const auto band = [&](double t) { return std::fmod(std::floor((t + phase) / (period / 2.0)), 2.0) == 0.0; };
  switch (texture) {
    case 0: return true;
    case 1: return band(y);
    case 2: return band(x);
    case 3: return band(x) == band(y);
    case 4: {
      const double cx = std::fmod(x + phase, period) - period / 2.0;
      const double cy = std::fmod(y + phase, period) - period / 2.0;
      return cx * cx + cy * cy > (period * 0.3) * (period * 0.3);
    }
    default: return true;
  }
}

Image render(int class_id, const SyntheticImageSpec& spec, std::mt19937_64& rng) {
  const int shape = class_id / kTextureCount;
  const int texture = class_id % kTextureCount;
  const auto size = spec.image_size;
  const double s = static_cast<double>(size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Background: two-colour linear gradient in a random direction.
  const Rgb bg_a = random_colour(rng);
  const Rgb bg_b = random_colour(rng);
  const double theta = unit(rng) * 2.0 * std::numbers::pi;
  const double gx = std::cos(theta), gy = std::sin(theta);
  std::vector<double> canvas(static_cast<size_t>(size * size * 3));
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const double t = 0.5 + 0.5 * ((x / s - 0.5) * gx + (y / s - 0.5) * gy);
      for (size_t c = 0; c < 3; ++c) {
        canvas[(y * size + x) * 3 + c] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
      }
    }
  }

  // Clutter: soft blobs of random colour.
  const int blobs = static_cast<int>(std::lround(spec.clutter * 6.0));
  for (int b = 0; b < blobs; ++b) {
    const double bx = unit(rng) * s, by = unit(rng) * s;
    const double br = (0.08 + 0.2 * unit(rng)) * s;
    const Rgb col = random_colour(rng);
    const double strength = 0.4 + 0.5 * unit(rng);
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        const double d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (br * br);
        const double w = strength * std::exp(-d2);
        for (size_t c = 0; c < 3; ++c) {
          auto& v = canvas[(y * size + x) * 3 + c];
          v = v * (1.0 - w) + col[c] * w;
        }
      }
    }
  }

  // Object.
  const double radius = (0.2 + 0.12 * unit(rng)) * s;
  const double cx = (0.3 + 0.4 * unit(rng)) * s;
  const double cy = (0.3 + 0.4 * unit(rng)) * s;
  const double rot = (unit(rng) - 0.5) * (std::numbers::pi / 6.0);
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double period = 4.0 + 2.0 * unit(rng);
  const double phase = unit(rng) * period;
  const Rgb fg_a = random_colour(rng);
  const Rgb fg_b = contrasting(fg_a, rng);
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const double dx = (x + 0.5 - cx) / radius;
      const double dy = (y + 0.5 - cy) / radius;
      const double u = cr * dx + sr * dy;
      const double v = -sr * dx + cr * dy;
      if (!inside_shape(shape, u, v)) continue;
      const Rgb& col = texture_first(texture, static_cast<double>(x), static_cast<double>(y), period, phase)
                           ? fg_a
                           : fg_b;
      for (size_t c = 0; c < 3; ++c) canvas[(y * size + x) * 3 + c] = col[c];
    }
  }

  std::normal_distribution<double> noise(0.0, spec.pixel_noise);
  Image img(size, size);
  for (size_t i = 0; i < canvas.size(); ++i) {
    const double v = canvas[i] + (spec.pixel_noise > 0.0 ? noise(rng) : 0.0);
    img.rgb[i] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return img;
}

}  // namespace

std::vector<int> target_class_ids() {
  std::vector<int> out;
  for (int id = 0; id < kUniverseClasses; ++id) {
    if (std::find(kSourceClassIds.begin(), kSourceClassIds.end(), id) == kSourceClassIds.end()) {
      out.push_back(id);
    }
  }
  return out;
}

std::string universe_class_name(int id) {
  if (id < 0 || id >= kUniverseClasses) throw InvalidInput("universe class id out of range");
  char buf[64];
  std::snprintf(buf, sizeof(buf), "c%02d_%s_%s", id, kShapeNames[id / kTextureCount],
                kTextureNames[id % kTextureCount]);
  return buf;
}

LabeledImages generate_shape_texture_images(const SyntheticImageSpec& spec) {
  if (spec.class_ids.empty() || spec.images_per_class < 1 || spec.image_size < 8) {
    throw InvalidInput("SyntheticImageSpec: need classes, >= 1 image per class and size >= 8");
  }
  LabeledImages out;
  for (int id : spec.class_ids) out.classes.push_back(universe_class_name(id));
  out.manifest.classes = out.classes;
  out.manifest.seed = spec.seed;
  for (size_t label = 0; label < spec.class_ids.size(); ++label) {
    const int id = spec.class_ids[label];
    // Per-class stream so adding classes never perturbs existing ones.
    std::mt19937_64 rng(spec.seed * 1000003ULL + static_cast<uint64_t>(id) * 7919ULL + 17ULL);
    for (int64_t i = 0; i < spec.images_per_class; ++i) {
      out.images.push_back(render(id, spec, rng));
      out.labels.push_back(static_cast<int64_t>(label));
      char name[32];
      std::snprintf(name, sizeof(name), "%05lld.ppm", static_cast<long long>(i));
      out.manifest.entries.push_back({out.classes[label] + "/" + name, static_cast<int64_t>(label)});
    }
  }
  return out;
}

void write_class_directory(const LabeledImages& data, const std::filesystem::path& root) {
  for (size_t i = 0; i < data.size(); ++i) {
    write_image(data.images[i], root / data.manifest.entries[i].path);
  }
}

TensorDataset make_separable_feature_dataset(const SeparableFeatureSpec& spec) {
  if (spec.examples < 2 || spec.channels < 1 || spec.height < 1 || spec.width < 2) {
    throw InvalidInput("SeparableFeatureSpec: bad extents");
  }
  for (auto c : spec.signal_channels) {
    if (c < 0 || c >= spec.channels) throw InvalidInput("signal channel out of range");
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed);
  auto x = torch::randn({spec.examples, spec.channels, spec.height, spec.width}, gen, torch::kFloat);
  auto labels = torch::arange(spec.examples, torch::kLong).remainder(2);

  // Class-independent blob in a random location on every non-signal channel.
  auto blob_h = torch::randint(spec.height, {spec.examples, spec.channels}, gen, torch::kLong);
  auto blob_w = torch::randint(spec.width, {spec.examples, spec.channels}, gen, torch::kLong);
  auto xa = x.accessor<float, 4>();
  auto la = labels.accessor<int64_t, 1>();
  auto bh = blob_h.accessor<int64_t, 2>();
  auto bw = blob_w.accessor<int64_t, 2>();
  const int64_t half = spec.width / 2;
  for (int64_t n = 0; n < spec.examples; ++n) {
    for (int64_t c = 0; c < spec.channels; ++c) {
      const bool signal = std::find(spec.signal_channels.begin(), spec.signal_channels.end(), c) !=
                          spec.signal_channels.end();
      if (signal) {
        const int64_t w0 = la[n] == 0 ? 0 : half;
        const int64_t w1 = la[n] == 0 ? half : spec.width;
        for (int64_t h = 0; h < spec.height; ++h) {
          for (int64_t w = w0; w < w1; ++w) xa[n][c][h][w] += static_cast<float>(spec.signal);
        }
      } else {
        xa[n][c][bh[n][c]][bw[n][c]] += static_cast<float>(spec.signal);
      }
    }
  }
  return tensor_dataset(x, labels, 2);
}

}  // namespace tred
