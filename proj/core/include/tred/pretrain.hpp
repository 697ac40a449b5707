#pragma once

// Desk-scale source pretraining from scratch.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "tred/backbone.hpp"
#include "tred/data.hpp"
#include "tred/finetune.hpp"

namespace tred {

struct PretrainOptions {
  double weight_decay = 5e-4;
  std::string dataset_name = "source";
};

struct PretrainResult {
  ModelAdapter model;
  double train_top1 = 0.0;
  double test_top1 = 0.0;
  nlohmann::json manifest;  // spec hash, dataset hash, accuracies, schedule
};

/// Momentum SGD on cross-entropy over all parameters with step decay.
/// `test` may be null; test_top1 is then reported on the training set.
PretrainResult pretrain_source(const BackboneSpec& spec, const TensorDataset& train, const TensorDataset* test,
                               const TrainingSchedule& schedule, const PretrainOptions& options = {});

/// Checkpoint plus manifest (written as `path` and `path.json`).
void save_source(const PretrainResult& result, const std::filesystem::path& path);

}  // namespace tred
