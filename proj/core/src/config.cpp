#include "tred/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include "tred/error.hpp"
#include "tred/hashing.hpp"

namespace tred {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kTopLevelKeys{"train_dir",    "test_dir",     "transform", "sample_rate",
                                          "source",       "disentangler_checkpoint", "regularizer",
                                          "disentangler", "stage1",       "stage2",    "seed",
                                          "num_seeds",    "output_dir"};

nlohmann::json stage1_json(const DisentanglerSchedule& s) {
  return {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate}, {"seed", s.seed}};
}

DisentanglerSchedule stage1_from_json(const nlohmann::json& j) {
  DisentanglerSchedule s;
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.seed = j.value("seed", s.seed);
  return s;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInput("config: top level must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!kTopLevelKeys.count(key)) throw InvalidInput("config: unknown key '" + key + "'");
  }
  ExperimentConfig c;
  try {
    c.train_dir = j.value("train_dir", std::string{});
    c.test_dir = j.value("test_dir", std::string{});
    if (j.contains("transform")) c.transform = TransformConfig::from_json(j.at("transform"));
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.source_checkpoint = j.value("source", std::string{});
    c.disentangler_checkpoint = j.value("disentangler_checkpoint", std::string{});
    if (j.contains("regularizer")) c.regularizer = RegularizerConfig::from_json(j.at("regularizer"));
    if (j.contains("disentangler")) c.disentangler = DisentanglerConfig::from_json(j.at("disentangler"));
    if (j.contains("stage1")) c.stage1 = stage1_from_json(j.at("stage1"));
    if (j.contains("stage2")) c.stage2 = TrainingSchedule::from_json(j.at("stage2"));
    c.seed = j.value("seed", c.seed);
    c.num_seeds = j.value("num_seeds", c.num_seeds);
    c.output_dir = j.value("output_dir", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
  c.validate(false);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw MissingArtifact("config not found: " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("config " + file.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"train_dir", train_dir.string()},
          {"test_dir", test_dir.string()},
          {"transform", transform.to_json()},
          {"sample_rate", sample_rate},
          {"source", source_checkpoint.string()},
          {"disentangler_checkpoint", disentangler_checkpoint.string()},
          {"regularizer", regularizer.to_json()},
          {"disentangler", disentangler.to_json()},
          {"stage1", stage1_json(stage1)},
          {"stage2", stage2.to_json()},
          {"seed", seed},
          {"num_seeds", num_seeds},
          {"output_dir", output_dir.string()}};
}

void ExperimentConfig::validate(bool check_paths) const {
  transform.validate();
  regularizer.validate();
  stage2.validate();
  if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw InvalidInput("config: sample_rate must be in (0, 1]");
  if (num_seeds < 1) throw InvalidInput("config: num_seeds must be at least 1");
  if (stage1.epochs < 1 || stage1.batch_size < 1 || !(stage1.learning_rate > 0.0)) {
    throw InvalidInput("config: stage1 values must be positive");
  }
  const auto& w = disentangler.weights;
  if (w.di < 0.0 || w.re < 0.0 || w.ce < 0.0) throw InvalidInput("config: loss weights must be non-negative");
  if (!(disentangler.hidden_ratio > 0.0)) throw InvalidInput("config: hidden_ratio must be positive");
  if (check_paths) {
    for (const auto* p : {&train_dir, &test_dir, &source_checkpoint, &disentangler_checkpoint}) {
      if (!p->empty() && !fs::exists(*p)) throw MissingArtifact("config: path does not exist: " + p->string());
    }
  }
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output_dir");
  return hash_hex(j.dump());
}

fs::path output_root() {
  const char* env = std::getenv("TRED_HOME");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("tred-runs");
}

fs::path prepare_output_dir(const fs::path& explicit_dir, const std::string& command, const std::string& config_hash,
                            bool force) {
  const fs::path dir = explicit_dir.empty() ? output_root() / (command + "-" + config_hash) : explicit_dir;
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw InvalidInput("output directory " + dir.string() + " already exists; pass --force to overwrite");
  }
  fs::create_directories(dir);
  return dir;
}

void append_run_index(const nlohmann::json& entry) {
  const fs::path root = output_root();
  fs::create_directories(root);
  std::ofstream out(root / "index.jsonl", std::ios::app);
  out << entry.dump() << "\n";
}

void write_file_atomic(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, file);
}

std::vector<RunRecord> load_run_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingArtifact("run directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("record", 0) == 0 && e.path().extension() == ".json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    out.push_back(RunRecord::from_json(nlohmann::json::parse(in)));
  }
  return out;
}

}  // namespace tred
