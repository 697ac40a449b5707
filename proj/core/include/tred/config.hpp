#pragma once

// Experiment configuration (JSON), config hashing, output directories and
// the append-only run index.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tred/data.hpp"
#include "tred/disentangler.hpp"
#include "tred/finetune.hpp"
#include "tred/regularizers.hpp"

namespace tred {

struct ExperimentConfig {
  std::filesystem::path train_dir;  // class-directory layout
  std::filesystem::path test_dir;
  TransformConfig transform;
  double sample_rate = 1.0;  // per-class subsampling of the training split
  std::filesystem::path source_checkpoint;
  std::filesystem::path disentangler_checkpoint;
  RegularizerConfig regularizer;
  DisentanglerConfig disentangler;  // channels and layer come from the source
  DisentanglerSchedule stage1;
  TrainingSchedule stage2;
  uint64_t seed = 0;
  int64_t num_seeds = 1;
  std::filesystem::path output_dir;  // empty: derived from the config hash

  /// Unknown keys and ill-typed values are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& file);
  nlohmann::json to_json() const;

  /// Value checks; with `check_paths`, every non-empty path must exist.
  void validate(bool check_paths = true) const;
  /// Hash of the canonical JSON (sorted keys), excluding output_dir.
  std::string hash() const;
};

/// $TRED_HOME if set, else ./tred-runs.
std::filesystem::path output_root();

/// `explicit_dir` if given, else <root>/<command>-<hash>. Refuses an existing
/// non-empty directory unless `force`.
std::filesystem::path prepare_output_dir(const std::filesystem::path& explicit_dir, const std::string& command,
                                         const std::string& config_hash, bool force);

/// Appends one JSON line to <root>/index.jsonl.
void append_run_index(const nlohmann::json& entry);

/// Writes `text` to `file` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& file, const std::string& text);

/// Every RunRecord JSON (files named record*.json) below `dir`, sorted by path.
std::vector<RunRecord> load_run_records(const std::filesystem::path& dir);

}  // namespace tred
