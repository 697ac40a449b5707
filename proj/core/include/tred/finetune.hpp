#pragma once

// Stage two: regularised fine-tuning of a target model initialised from the
// source weights, evaluation and run records.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "tred/backbone.hpp"
#include "tred/data.hpp"
#include "tred/disentangler.hpp"
#include "tred/regularizers.hpp"

namespace tred {

struct TrainingSchedule {
  int64_t epochs = 40;
  int64_t batch_size = 64;
  double base_lr = 0.01;
  double momentum = 0.9;
  int64_t lr_decay_epoch = 25;
  double lr_decay_factor = 0.1;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingSchedule from_json(const nlohmann::json& j);
};

/// base_lr * factor^(epoch >= decay_epoch); epochs count from zero.
double learning_rate_at(const TrainingSchedule& schedule, int64_t epoch);

struct LossBreakdown {
  double ce = 0.0;
  double penalty = 0.0;
  double total = 0.0;
};

/// Ω for one batch. `fm_target` and `logits` come from the target forward
/// pass; source and disentangler run without gradient on `inputs`.
torch::Tensor regularizer_penalty(const RegularizerConfig& reg, const ModelAdapter& target,
                                  const FeatureMap& fm_target, const torch::Tensor& inputs,
                                  const ModelAdapter* source, const DisentanglerState* dis);

/// One optimiser update of mean cross-entropy + Ω on the target parameters.
/// Throws MissingArtifact when TRED lacks a disentangler (or a SPAR method
/// lacks a source) and DivergenceError on a non-finite loss.
LossBreakdown srm_step(const Batch& batch, ModelAdapter& target, const ModelAdapter* source,
                       const RegularizerConfig& reg, const DisentanglerState* dis,
                       torch::optim::Optimizer& optimizer);

struct EpochMetrics {
  int64_t epoch = 0;
  double lr = 0.0;
  double ce = 0.0;
  double penalty = 0.0;
  double train_loss = 0.0;
  std::optional<double> eval_top1;
  bool operator==(const EpochMetrics&) const = default;
};

/// Outcome of one fine-tuning run.
struct RunRecord {
  std::string config_hash;
  std::string dataset;
  std::string method;
  double alpha = 0.0;
  uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  double final_top1 = 0.0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
  /// Equality of everything except wall-clock time.
  bool same_metrics(const RunRecord& other) const;
};

struct FinetuneOptions {
  std::string dataset_name = "target";
  /// JSON-lines stream, one object per step: {epoch, step, ce, penalty, total, lr}.
  std::optional<std::filesystem::path> metrics_path;
  /// Evaluate on the eval set after every epoch (otherwise only at the end).
  bool eval_each_epoch = false;
};

struct FinetuneResult {
  ModelAdapter model;
  RunRecord record;
};

/// Builds the target from the source weights with a fresh head (seeded by
/// schedule.seed), runs the schedule of srm_step over shuffled mini-batches
/// and evaluates on `eval` when given. Source and disentangler are read only.
FinetuneResult finetune(const TensorDataset& train, const TensorDataset* eval, const ModelAdapter& source,
                        const RegularizerConfig& reg, const DisentanglerState* dis,
                        const TrainingSchedule& schedule, const FinetuneOptions& options = {});

/// Top-1 accuracy in percent with centre crops and frozen statistics.
double evaluate(const ModelAdapter& model, const TensorDataset& data, int64_t batch_size = 256);

struct AccuracySummary {
  double mean = 0.0;
  double std = 0.0;
  size_t n = 0;
};

/// Mean and standard deviation (sample by default, population on request).
AccuracySummary summarize(const std::vector<double>& values, bool sample_std = true);

}  // namespace tred
