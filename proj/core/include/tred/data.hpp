#pragma once

// Dataset ingestion, deterministic split manifests, per-class subsampling,
// train/eval transforms and the mini-batch plumbing used by every trainer.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "tred/image.hpp"

namespace tred {

enum class DatasetLayout { kClassDirectory, kManifestFile };

/// Resize-then-crop policy plus per-channel standardisation statistics.
struct TransformConfig {
  int64_t resize_shorter = 40;  // R
  int64_t crop = 32;            // S
  bool horizontal_flip = true;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.25, 0.25, 0.25};

  void validate() const;
  nlohmann::json to_json() const;
  static TransformConfig from_json(const nlohmann::json& j);
  /// Full-resolution values: shorter edge 256, crop 224.
  static TransformConfig full_scale();
};

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  int64_t class_index = 0;
  bool operator==(const ManifestEntry&) const = default;
};

/// Ordered (path, class) list with the seed and rate that produced it.
struct SplitManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> classes;
  uint64_t seed = 0;
  double rate = 1.0;

  size_t size() const { return entries.size(); }
  std::vector<size_t> class_counts() const;
  /// Throws InvalidInput on duplicates or out-of-range class indices.
  void validate() const;

  /// The on-disk manifest format: a JSON array of {path, class}.
  nlohmann::json entries_json() const;
  void save(const std::filesystem::path& file) const;
  static SplitManifest load(const std::filesystem::path& file,
                            std::vector<std::string> classes = {});
  bool operator==(const SplitManifest&) const = default;
};

struct DatasetSpec {
  std::filesystem::path root;
  DatasetLayout layout = DatasetLayout::kClassDirectory;
  /// Manifest file for kManifestFile; relative paths resolve against root.
  std::filesystem::path manifest;
  /// Empty means "discover" (class directories, sorted lexicographically).
  std::vector<std::string> classes;
  std::string split = "train";
  TransformConfig transform;
  /// Unreadable images are skipped with a warning when true, abort otherwise.
  bool skip_unreadable = true;
};

struct LabeledImages {
  std::vector<Image> images;
  std::vector<int64_t> labels;
  std::vector<std::string> classes;
  SplitManifest manifest;

  size_t size() const { return images.size(); }
  int64_t num_classes() const { return static_cast<int64_t>(classes.size()); }
};

/// Enumerates root/<class>/<files> in lexicographic order. Empty classes abort.
SplitManifest scan_class_directory(const std::filesystem::path& root,
                                   std::vector<std::string> classes = {});

LabeledImages load_dataset(const DatasetSpec& spec);

/// Per class: shuffle by seed, keep ceil(rate * count), restore original order.
SplitManifest subsample_per_class(const SplitManifest& manifest, double rate, uint64_t seed);

/// The examples of `data` named by `manifest`, in manifest order.
LabeledImages select_entries(const LabeledImages& data, const SplitManifest& manifest);

/// Per-class subsample count under the ceil convention.
size_t subsample_count(size_t count, double rate);

/// Resize shorter edge to R, random S x S crop, optional flip, standardise.
torch::Tensor transform_train(const Image& image, const TransformConfig& cfg, std::mt19937_64& rng);

/// Resize shorter edge to R, centre S x S crop, standardise.
torch::Tensor transform_eval(const Image& image, const TransformConfig& cfg);

/// (3, h, w) tensor in [0, 1] with shorter edge resized to `shorter` (bilinear).
torch::Tensor resize_shorter_edge(const torch::Tensor& chw, int64_t shorter);

torch::Tensor standardize(const torch::Tensor& chw, const TransformConfig& cfg);

/// Per-channel mean and std of pixel values in [0, 1].
std::pair<std::array<double, 3>, std::array<double, 3>> channel_statistics(
    const std::vector<Image>& images);

/// In-memory examples ready for batching: resized and standardised tensors,
/// cropped (randomly or centrally) at batch time.
struct TensorDataset {
  std::vector<torch::Tensor> items;
  torch::Tensor labels;  // int64 (N)
  int64_t num_classes = 0;
  int64_t crop = 0;  // 0 means no cropping
  bool horizontal_flip = false;

  int64_t size() const { return static_cast<int64_t>(items.size()); }
  bool empty() const { return items.empty(); }
  std::string content_hash() const;
};

struct Batch {
  torch::Tensor inputs;
  torch::Tensor labels;
};

TensorDataset prepare_dataset(const LabeledImages& data, const TransformConfig& cfg);

/// Wraps a stacked (N, ...) tensor; no cropping or flipping.
TensorDataset tensor_dataset(const torch::Tensor& inputs, const torch::Tensor& labels,
                             int64_t num_classes);

TensorDataset subset(const TensorDataset& data, std::span<const int64_t> indices);

/// Training batches use random crops and flips; evaluation batches centre crops.
Batch make_batch(const TensorDataset& data, std::span<const int64_t> indices, bool train,
                 std::mt19937_64& rng);

/// A shuffled partition of [0, n) into batches of at most batch_size.
std::vector<std::vector<int64_t>> shuffled_batches(int64_t n, int64_t batch_size, std::mt19937_64& rng);

/// In-order partition of [0, n).
std::vector<std::vector<int64_t>> sequential_batches(int64_t n, int64_t batch_size);

/// Stratified split: per class, a seeded fraction goes to the second part.
std::pair<std::vector<int64_t>, std::vector<int64_t>> stratified_split(const TensorDataset& data,
                                                                       double holdout_fraction,
                                                                       uint64_t seed);

}  // namespace tred
