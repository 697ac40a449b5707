#include "tred/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <torch/torch.h>

#include "tred/error.hpp"
#include "tred/log.hpp"
#include "tred/hashing.hpp"

namespace tred {

namespace fs = std::filesystem;

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png" || ext == ".ppm";
}

// Crop offsets for an S x S window; random when rng is given, centred otherwise.
torch::Tensor crop_and_flip(const torch::Tensor& chw, int64_t crop, bool flip,
                            std::mt19937_64* rng) {
  const int64_t h = chw.size(1);
  const int64_t w = chw.size(2);
  if (crop <= 0) return chw;
  if (crop > h || crop > w) throw InvalidInput("crop larger than resized image");
  int64_t top = (h - crop) / 2;
  int64_t left = (w - crop) / 2;
  bool do_flip = false;
  if (rng != nullptr) {
    top = std::uniform_int_distribution<int64_t>(0, h - crop)(*rng);
    left = std::uniform_int_distribution<int64_t>(0, w - crop)(*rng);
    do_flip = flip && std::bernoulli_distribution(0.5)(*rng);
  }
  auto out = chw.narrow(1, top, crop).narrow(2, left, crop);
  if (do_flip) out = out.flip({2});
  return out;
}

}  // namespace

void TransformConfig::validate() const {
  if (crop < 1 || resize_shorter < crop) {
    throw InvalidInput("TransformConfig: need R >= S >= 1");
  }
  for (double s : std) {
    if (!(s > 0.0)) throw InvalidInput("TransformConfig: std must be positive");
  }
}

nlohmann::json TransformConfig::to_json() const {
  return {{"resize_shorter", resize_shorter}, {"crop", crop}, {"horizontal_flip", horizontal_flip},
          {"mean", mean}, {"std", std}};
}

TransformConfig TransformConfig::from_json(const nlohmann::json& j) {
  TransformConfig c;
  c.resize_shorter = j.value("resize_shorter", c.resize_shorter);
  c.crop = j.value("crop", c.crop);
  c.horizontal_flip = j.value("horizontal_flip", c.horizontal_flip);
  c.mean = j.value("mean", c.mean);
  c.std = j.value("std", c.std);
  return c;
}

TransformConfig TransformConfig::full_scale() {
  TransformConfig c;
  c.resize_shorter = 256;
  c.crop = 224;
  return c;
}

std::vector<size_t> SplitManifest::class_counts() const {
  int64_t k = static_cast<int64_t>(classes.size());
  for (const auto& e : entries) k = std::max(k, e.class_index + 1);
  std::vector<size_t> counts(static_cast<size_t>(k), 0);
  for (const auto& e : entries) ++counts[static_cast<size_t>(e.class_index)];
  return counts;
}

void SplitManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.path).second) throw InvalidInput("manifest: duplicate entry " + e.path);
    if (e.class_index < 0 ||
        (!classes.empty() && e.class_index >= static_cast<int64_t>(classes.size()))) {
      throw InvalidInput("manifest: class index out of range for " + e.path);
    }
  }
}

nlohmann::json SplitManifest::entries_json() const {
  auto arr = nlohmann::json::array();
  for (const auto& e : entries) arr.push_back({{"path", e.path}, {"class", e.class_index}});
  return arr;
}

void SplitManifest::save(const fs::path& file) const {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write manifest " + file.string());
  out << entries_json().dump(1) << "\n";
}

SplitManifest SplitManifest::load(const fs::path& file, std::vector<std::string> classes) {
  std::ifstream in(file);
  if (!in) throw MissingArtifact("manifest not found: " + file.string());
  const auto arr = nlohmann::json::parse(in);
  if (!arr.is_array()) throw InvalidInput("manifest must be a JSON array: " + file.string());
  SplitManifest m;
  m.classes = std::move(classes);
  for (const auto& item : arr) {
    m.entries.push_back({item.at("path").get<std::string>(), item.at("class").get<int64_t>()});
  }
  m.validate();
  return m;
}

SplitManifest scan_class_directory(const fs::path& root, std::vector<std::string> classes) {
  if (!fs::is_directory(root)) throw MissingArtifact("dataset root not found: " + root.string());
  if (classes.empty()) {
    for (const auto& dir : fs::directory_iterator(root)) {
      if (dir.is_directory()) classes.push_back(dir.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
  }
  if (classes.empty()) throw InvalidInput("no class directories under " + root.string());

  SplitManifest m;
  m.classes = classes;
  for (size_t c = 0; c < classes.size(); ++c) {
    std::vector<std::string> files;
    const auto dir = root / classes[c];
    if (fs::is_directory(dir)) {
      for (const auto& f : fs::directory_iterator(dir)) {
        if (f.is_regular_file() && is_image_file(f.path())) {
          files.push_back((fs::path(classes[c]) / f.path().filename()).generic_string());
        }
      }
    }
    if (files.empty()) throw InvalidInput("empty class '" + classes[c] + "'");
    std::sort(files.begin(), files.end());
    for (auto& f : files) m.entries.push_back({std::move(f), static_cast<int64_t>(c)});
  }
  return m;
}

LabeledImages load_dataset(const DatasetSpec& spec) {
  SplitManifest manifest;
  if (spec.layout == DatasetLayout::kClassDirectory) {
    manifest = scan_class_directory(spec.root, spec.classes);
  } else {
    const auto file = spec.manifest.is_absolute() ? spec.manifest : spec.root / spec.manifest;
    manifest = SplitManifest::load(file, spec.classes);
    if (manifest.classes.empty()) {
      int64_t k = 0;
      for (const auto& e : manifest.entries) k = std::max(k, e.class_index + 1);
      for (int64_t c = 0; c < k; ++c) manifest.classes.push_back(std::to_string(c));
    }
    auto counts = manifest.class_counts();
    for (size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] == 0) throw InvalidInput("empty class '" + manifest.classes[c] + "'");
    }
  }

  LabeledImages out;
  out.classes = manifest.classes;
  out.manifest.classes = manifest.classes;
  out.manifest.seed = manifest.seed;
  out.manifest.rate = manifest.rate;
  for (const auto& e : manifest.entries) {
    try {
      out.images.push_back(read_image(spec.root / e.path));
    } catch (const InvalidInput& err) {
      if (!spec.skip_unreadable) throw;
      log::warn("skipping unreadable image " + e.path + ": " + err.what());
      continue;
    }
    out.labels.push_back(e.class_index);
    out.manifest.entries.push_back(e);
  }
  if (out.images.empty()) throw InvalidInput("dataset has no readable images: " + spec.root.string());
  return out;
}

LabeledImages select_entries(const LabeledImages& data, const SplitManifest& manifest) {
  std::map<std::string, size_t> position;
  for (size_t i = 0; i < data.manifest.entries.size(); ++i) position[data.manifest.entries[i].path] = i;
  LabeledImages out;
  out.classes = data.classes;
  out.manifest.classes = data.classes;
  out.manifest.seed = manifest.seed;
  out.manifest.rate = manifest.rate;
  for (const auto& e : manifest.entries) {
    auto it = position.find(e.path);
    if (it == position.end()) throw InvalidInput("manifest entry not in dataset: " + e.path);
    out.images.push_back(data.images[it->second]);
    out.labels.push_back(data.labels[it->second]);
    out.manifest.entries.push_back(e);
  }
  return out;
}

size_t subsample_count(size_t count, double rate) {
  if (!(rate > 0.0) || rate > 1.0) throw InvalidInput("subsample rate must lie in (0, 1]");
  // The small slack keeps products such as 0.3 * 30 from rounding up to 10.
  const double raw = rate * static_cast<double>(count);
  return std::min(count, static_cast<size_t>(std::ceil(raw - 1e-9)));
}

SplitManifest subsample_per_class(const SplitManifest& manifest, double rate, uint64_t seed) {
  if (!(rate > 0.0) || rate > 1.0) throw InvalidInput("subsample rate must lie in (0, 1]");
  std::map<int64_t, std::vector<size_t>> by_class;
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    by_class[manifest.entries[i].class_index].push_back(i);
  }
  std::vector<size_t> keep;
  for (auto& [cls, idx] : by_class) {
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(cls + 1)));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(subsample_count(idx.size(), rate));
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());

  SplitManifest out;
  out.classes = manifest.classes;
  out.seed = seed;
  out.rate = manifest.rate * rate;
  for (size_t i : keep) out.entries.push_back(manifest.entries[i]);
  return out;
}

torch::Tensor resize_shorter_edge(const torch::Tensor& chw, int64_t shorter) {
  const int64_t h = chw.size(1);
  const int64_t w = chw.size(2);
  if (h < 1 || w < 1) throw InvalidInput("image smaller than 1px");
  if (std::min(h, w) == shorter) return chw;
  int64_t nh, nw;
  if (h <= w) {
    nh = shorter;
    nw = std::max<int64_t>(1, static_cast<int64_t>(std::lround(static_cast<double>(w) * shorter / h)));
  } else {
    nw = shorter;
    nh = std::max<int64_t>(1, static_cast<int64_t>(std::lround(static_cast<double>(h) * shorter / w)));
  }
  namespace F = torch::nn::functional;
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{nh, nw})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

torch::Tensor standardize(const torch::Tensor& chw, const TransformConfig& cfg) {
  auto mean = torch::tensor({cfg.mean[0], cfg.mean[1], cfg.mean[2]}, torch::kFloat).view({3, 1, 1});
  auto std = torch::tensor({cfg.std[0], cfg.std[1], cfg.std[2]}, torch::kFloat).view({3, 1, 1});
  return (chw - mean) / std;
}

torch::Tensor transform_train(const Image& image, const TransformConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  auto t = standardize(resize_shorter_edge(image_to_tensor(image), cfg.resize_shorter), cfg);
  return crop_and_flip(t, cfg.crop, cfg.horizontal_flip, &rng).contiguous();
}

torch::Tensor transform_eval(const Image& image, const TransformConfig& cfg) {
  cfg.validate();
  auto t = standardize(resize_shorter_edge(image_to_tensor(image), cfg.resize_shorter), cfg);
  return crop_and_flip(t, cfg.crop, false, nullptr).contiguous();
}

std::pair<std::array<double, 3>, std::array<double, 3>> channel_statistics(
    const std::vector<Image>& images) {
  std::array<double, 3> sum{}, sq{};
  double n = 0.0;
  for (const auto& img : images) {
    for (size_t i = 0; i < img.rgb.size(); i += 3) {
      for (size_t c = 0; c < 3; ++c) {
        const double v = img.rgb[i + c] / 255.0;
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    n += static_cast<double>(img.width * img.height);
  }
  if (n == 0.0) throw InvalidInput("channel_statistics: no pixels");
  std::array<double, 3> mean{}, std{};
  for (size_t c = 0; c < 3; ++c) {
    mean[c] = sum[c] / n;
    std[c] = std::sqrt(std::max(sq[c] / n - mean[c] * mean[c], 1e-12));
  }
  return {mean, std};
}

std::string TensorDataset::content_hash() const {
  ContentHash h;
  for (const auto& t : items) h.update(t);
  if (labels.defined()) h.update(labels);
  h.update(static_cast<uint64_t>(num_classes));
  return h.hex();
}

TensorDataset prepare_dataset(const LabeledImages& data, const TransformConfig& cfg) {
  cfg.validate();
  TensorDataset out;
  out.items.reserve(data.size());
  for (const auto& img : data.images) {
    out.items.push_back(standardize(resize_shorter_edge(image_to_tensor(img), cfg.resize_shorter), cfg)
                            .contiguous());
  }
  out.labels = torch::tensor(data.labels, torch::kLong);
  out.num_classes = data.num_classes();
  out.crop = cfg.crop;
  out.horizontal_flip = cfg.horizontal_flip;
  return out;
}

TensorDataset tensor_dataset(const torch::Tensor& inputs, const torch::Tensor& labels,
                             int64_t num_classes) {
  if (inputs.size(0) != labels.size(0)) throw ShapeMismatch("inputs and labels differ in length");
  TensorDataset out;
  out.items.reserve(static_cast<size_t>(inputs.size(0)));
  for (int64_t i = 0; i < inputs.size(0); ++i) out.items.push_back(inputs[i]);
  out.labels = labels.to(torch::kLong);
  out.num_classes = num_classes;
  return out;
}

TensorDataset subset(const TensorDataset& data, std::span<const int64_t> indices) {
  TensorDataset out;
  out.num_classes = data.num_classes;
  out.crop = data.crop;
  out.horizontal_flip = data.horizontal_flip;
  out.items.reserve(indices.size());
  for (int64_t i : indices) out.items.push_back(data.items.at(static_cast<size_t>(i)));
  auto idx = torch::tensor(std::vector<int64_t>(indices.begin(), indices.end()), torch::kLong);
  out.labels = data.labels.index_select(0, idx);
  return out;
}

Batch make_batch(const TensorDataset& data, std::span<const int64_t> indices, bool train,
                 std::mt19937_64& rng) {
  if (indices.empty()) throw InvalidInput("make_batch: empty index set");
  std::vector<torch::Tensor> xs;
  xs.reserve(indices.size());
  for (int64_t i : indices) {
    const auto& item = data.items.at(static_cast<size_t>(i));
    xs.push_back(item.dim() == 3 ? crop_and_flip(item, data.crop, data.horizontal_flip,
                                                 train ? &rng : nullptr)
                                 : item);
  }
  auto idx = torch::tensor(std::vector<int64_t>(indices.begin(), indices.end()), torch::kLong);
  return {torch::stack(xs), data.labels.index_select(0, idx)};
}

std::vector<std::vector<int64_t>> shuffled_batches(int64_t n, int64_t batch_size, std::mt19937_64& rng) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int64_t>> out;
  for (int64_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  }
  return out;
}

std::vector<std::vector<int64_t>> sequential_batches(int64_t n, int64_t batch_size) {
  std::vector<std::vector<int64_t>> out;
  for (int64_t i = 0; i < n; i += batch_size) {
    std::vector<int64_t> b(static_cast<size_t>(std::min(n, i + batch_size) - i));
    std::iota(b.begin(), b.end(), i);
    out.push_back(std::move(b));
  }
  return out;
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> stratified_split(const TensorDataset& data,
                                                                       double holdout_fraction,
                                                                       uint64_t seed) {
  if (!(holdout_fraction > 0.0) || holdout_fraction >= 1.0) {
    throw InvalidInput("stratified_split: fraction must lie in (0, 1)");
  }
  std::map<int64_t, std::vector<int64_t>> by_class;
  auto labels = data.labels.contiguous();
  for (int64_t i = 0; i < data.size(); ++i) by_class[labels[i].item<int64_t>()].push_back(i);
  std::vector<int64_t> keep, held;
  std::mt19937_64 rng(seed);
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() < 2) {
      keep.insert(keep.end(), idx.begin(), idx.end());
      continue;
    }
    auto n_hold = static_cast<size_t>(std::lround(holdout_fraction * static_cast<double>(idx.size())));
    n_hold = std::clamp<size_t>(n_hold, 1, idx.size() - 1);
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_hold));
    keep.insert(keep.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_hold), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  std::sort(held.begin(), held.end());
  return {keep, held};
}

}  // namespace tred
