#pragma once

// Two-stage orchestration: per-seed stage-1 artifacts (disentangler, DELTA
// weights), stage-2 runs, hold-out α selection, and the desk-scale
// source/target task built from the synthetic universe.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

#include "tred/backbone.hpp"
#include "tred/data.hpp"
#include "tred/disentangler.hpp"
#include "tred/finetune.hpp"
#include "tred/mmd.hpp"
#include "tred/regularizers.hpp"
#include "tred/synthetic.hpp"

namespace tred {

/// Stage seeds derived from one global seed by fixed offsets.
struct SeedPlan {
  uint64_t global = 0;
  uint64_t stage1() const { return global + 1000; }
  uint64_t stage2() const { return global + 2000; }
  uint64_t data() const { return global + 3000; }
};

struct TransferSetup {
  std::string name = "target";
  TensorDataset train;
  TensorDataset test;
  TrainingSchedule schedule;
  DisentanglerSchedule stage1;
  DisentanglerLossWeights weights;
  double hidden_ratio = 0.5;
  KernelConfig kernel;
  ProbeOptions probe;
  double beta = 1e-4;  // head decay (all weights for L2)
};

/// True for methods whose strength is chosen from an α grid.
bool uses_alpha(RegKind kind);

class TransferRunner {
 public:
  TransferRunner(ModelAdapter source, TransferSetup setup);

  const ModelAdapter& source() const { return source_; }
  const TransferSetup& setup() const { return setup_; }

  /// Disentangler trained on `data` (default: the training set) with the
  /// stage-1 seed of `seed`; cached per (data, seed, ablation).
  const DisentanglerState& disentangler(uint64_t seed, bool ablate_mmd = false, const TensorDataset* data = nullptr);
  const DisentanglerCurve& disentangler_curve(uint64_t seed, bool ablate_mmd = false,
                                              const TensorDataset* data = nullptr);
  const ChannelWeights& delta_weights(uint64_t seed, const TensorDataset* data = nullptr);

  RegularizerConfig make_config(RegKind kind, double alpha, uint64_t seed, const TensorDataset* data = nullptr);

  /// One stage-2 run; `train`/`eval` default to the setup's split. TRED
  /// uses the disentangler of the same seed and training data.
  FinetuneResult run(RegKind kind, double alpha, uint64_t seed, bool ablate_mmd = false,
                     const TensorDataset* train = nullptr, const TensorDataset* eval = nullptr);

  /// Best α on a stratified hold-out split of the training set (ties go to
  /// the smaller α). Methods without α return 0 without training.
  double select_alpha(RegKind kind, const std::vector<double>& grid, uint64_t seed, double holdout_fraction = 1.0 / 3.0);

 private:
  struct Stage1 {
    std::unique_ptr<DisentanglerState> state;
    DisentanglerCurve curve;
  };
  Stage1& stage1(uint64_t seed, bool ablate_mmd, const TensorDataset* data);

  ModelAdapter source_;
  TransferSetup setup_;
  std::map<std::tuple<std::string, uint64_t, bool>, Stage1> disentanglers_;
  std::map<std::pair<std::string, uint64_t>, ChannelWeights> delta_;
};

/// Desk-scale task drawn from the synthetic shape×texture universe: a
/// 10-class source and a disjoint 20-class target.
struct DeskTaskConfig {
  int64_t source_train_per_class = 300;
  int64_t source_test_per_class = 60;
  int64_t target_train_per_class = 30;
  int64_t target_test_per_class = 50;
  int64_t image_size = 40;
  double clutter = 0.5;
  double pixel_noise = 8.0;
  TransformConfig transform;
  uint64_t seed = 0;
};

struct DeskData {
  TensorDataset source_train;
  TensorDataset source_test;
  TensorDataset target_train;
  TensorDataset target_test;
  /// Target training images kept for subsampling by manifest.
  LabeledImages target_train_images;
};

DeskData make_desk_data(const DeskTaskConfig& cfg);

}  // namespace tred
