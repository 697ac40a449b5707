#pragma once

// Diagnostics: singular spectra, 2-D embeddings, attention overlays,
// α sweeps, the source-retention probe and comparison tables.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "tred/backbone.hpp"
#include "tred/data.hpp"
#include "tred/disentangler.hpp"
#include "tred/features.hpp"
#include "tred/finetune.hpp"
#include "tred/image.hpp"
#include "tred/pipeline.hpp"

namespace tred {

// --- spectrum ---------------------------------------------------------------

enum class SpectrumVariant { kOriginal, kPositive };
std::string to_string(SpectrumVariant v);

struct SpectrumReport {
  std::string layer_id;
  SpectrumVariant variant = SpectrumVariant::kOriginal;
  std::vector<double> sigmas;  // descending
  int64_t batch = 0;

  nlohmann::json to_json() const;
  static SpectrumReport from_json(const nlohmann::json& j);
};

SpectrumReport singular_spectrum(const FeatureMatrix& features, std::string layer_id = {},
                                 SpectrumVariant variant = SpectrumVariant::kOriginal);

/// Σσ² over the smallest ceil(n/4) singular values.
double bottom_quartile_energy(const SpectrumReport& report);

// --- embedding --------------------------------------------------------------

enum class EmbedBackend { kPca, kTsneIfAvailable };

struct Embedding {
  torch::Tensor points;  // (N, 2) double
  std::vector<int64_t> labels;
  std::string backend;

  void save_csv(const std::filesystem::path& file) const;
};

/// Rows of `descriptors` (N, C) projected to 2-D. No t-SNE backend is built
/// in, so kTsneIfAvailable falls back to PCA with a notice.
Embedding embed_2d(const torch::Tensor& descriptors, const std::vector<int64_t>& labels,
                   EmbedBackend backend = EmbedBackend::kPca);

/// Mean silhouette coefficient with Euclidean distances; needs ≥ 2 labels.
double silhouette_score(const torch::Tensor& points, const std::vector<int64_t>& labels);

// --- attention overlay ------------------------------------------------------

/// Attention map of a single-example feature map, bilinearly upsampled to
/// (height, width) and min-max normalised to [0, 1]. Constant maps give a
/// uniform field of ones, all-zero maps a field of zeros.
torch::Tensor attention_heatmap(const FeatureMap& fm, int64_t height, int64_t width);

struct OverlayResult {
  Image image;
  torch::Tensor heat;  // (H, W) in [0, 1]
  bool zero_attention = false;
};

OverlayResult attention_overlay(const Image& image, const FeatureMap& fm, double blend = 0.5);
OverlayResult attention_overlay(const Image& image, const FeatureMap& fm, const std::filesystem::path& out,
                                double blend = 0.5);

// --- alpha sweep ------------------------------------------------------------

struct SweepResult {
  std::string method;
  std::vector<double> alphas;  // strictly increasing
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<RunRecord> records;

  void validate() const;
  /// Best mean minus the mean at the largest α.
  double drop_to_last() const;
  nlohmann::json to_json() const;
  static SweepResult from_json(const nlohmann::json& j);
};

/// One fine-tuning run per (α, seed) on the runner's task.
SweepResult alpha_sweep(TransferRunner& runner, RegKind method, const std::vector<double>& alphas,
                        const std::vector<uint64_t>& seeds);

// --- source retention -------------------------------------------------------

enum class RetentionTransform { kIdentity, kDisentanglerPositive, kTransformOnly };
RetentionTransform parse_retention_transform(const std::string& name);

struct RetentionOptions {
  int64_t iterations = 300;
  double learning_rate = 0.05;  // Adam, full batch
  uint64_t seed = 0;
};

/// Trains a randomly initialised linear classifier on frozen, spatially
/// pooled and standardised features of the source task, then reports its
/// top-1 on `source_test`. kDisentanglerPositive needs `dis`;
/// kTransformOnly uses the features of `transformed` (e.g. a fine-tuned
/// target backbone) instead of the source model.
double source_retention_probe(RetentionTransform transform, const TensorDataset& source_train,
                              const TensorDataset& source_test, const ModelAdapter& source,
                              const DisentanglerState* dis = nullptr, const ModelAdapter* transformed = nullptr,
                              const RetentionOptions& options = {});

// --- tables -----------------------------------------------------------------

struct TableCell {
  std::string dataset;
  std::string method;
  AccuracySummary summary;
};

struct ResultsTable {
  std::vector<std::string> datasets;
  std::vector<std::string> methods;  // method_order() first, others after
  std::vector<TableCell> cells;
  bool sample_std = true;

  const TableCell* find(const std::string& dataset, const std::string& method) const;
  /// Rows are datasets; the best mean of each row is wrapped in ** **.
  std::string to_text() const;
  /// dataset,method,mean,std,n_seeds
  std::string to_csv() const;
};

ResultsTable results_table(const std::vector<RunRecord>& records, bool sample_std = true);

}  // namespace tred
