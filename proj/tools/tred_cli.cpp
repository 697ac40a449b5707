// tred: command-line front end for the two-stage pipeline.
//
// Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "tred/analysis.hpp"
#include "tred/backbone.hpp"
#include "tred/config.hpp"
#include "tred/data.hpp"
#include "tred/disentangler.hpp"
#include "tred/error.hpp"
#include "tred/finetune.hpp"
#include "tred/image.hpp"
#include "tred/log.hpp"
#include "tred/pipeline.hpp"
#include "tred/pretrain.hpp"
#include "tred/regularizers.hpp"
#include "tred/synthetic.hpp"

using namespace tred;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by disentangle / finetune / evaluate / analyze sweep. Unset
// optionals fall back to the config file, then to built-in defaults.
struct ConfigFlags {
  std::string config_file;
  std::optional<std::string> train, test, source, disentangler, reg, out_dir;
  std::optional<double> alpha, beta, sample_rate, lr, stage1_lr;
  std::optional<int64_t> k, epochs, decay_epoch, batch_size, stage1_epochs, num_seeds;
  std::optional<uint64_t> seed;
  bool ablate_mmd = false;
  bool force = false;

  void add_data(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON experiment config; flags override its values")
        ->check(CLI::ExistingFile);
    cmd->add_option("--train", train, "Training images (one directory per class)");
    cmd->add_option("--test", test, "Test images (one directory per class)");
    cmd->add_option("--source", source, "Pretrained source checkpoint");
    cmd->add_option("--sample-rate", sample_rate, "Per-class fraction of training images to keep");
    cmd->add_option("--seed", seed, "Global seed");
    cmd->add_option("--out-dir", out_dir, "Output directory (default: $TRED_HOME/<command>-<config hash>)");
    cmd->add_flag("--force", force, "Overwrite a non-empty output directory");
  }
  void add_stage1(CLI::App* cmd) {
    cmd->add_option("--stage1-epochs", stage1_epochs, "Disentangler epochs");
    cmd->add_option("--stage1-lr", stage1_lr, "Disentangler Adam learning rate");
    cmd->add_flag("--ablate-mmd", ablate_mmd, "Train without the MMD term (TRED-)");
  }
  void add_stage2(CLI::App* cmd) {
    cmd->add_option("--reg", reg, "none, l2, l2sp, at, delta, bss or tred");
    cmd->add_option("--alpha", alpha, "Regularization strength");
    cmd->add_option("--beta", beta, "Head weight decay (all weights for l2); default 1e-4");
    cmd->add_option("--k", k, "BSS: number of smallest singular values");
    cmd->add_option("--disentangler", disentangler, "Disentangler checkpoint (required for tred)");
    cmd->add_option("--epochs", epochs, "Fine-tuning epochs");
    cmd->add_option("--decay-epoch", decay_epoch, "Epoch at which the learning rate drops 10x");
    cmd->add_option("--batch-size", batch_size, "Mini-batch size");
    cmd->add_option("--lr", lr, "Base learning rate");
    cmd->add_option("--seeds", num_seeds, "Number of seeds (seed, seed+1, ...)");
  }

  ExperimentConfig build() const {
    nlohmann::json file = nlohmann::json::object();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      try {
        file = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw UsageError("config " + config_file + ": " + e.what());
      }
    }
    ExperimentConfig c = ExperimentConfig::from_json(file);
    if (train) c.train_dir = *train;
    if (test) c.test_dir = *test;
    if (source) c.source_checkpoint = *source;
    if (disentangler) c.disentangler_checkpoint = *disentangler;
    if (sample_rate) c.sample_rate = *sample_rate;
    if (seed) c.seed = *seed;
    if (out_dir) c.output_dir = *out_dir;
    if (stage1_epochs) c.stage1.epochs = *stage1_epochs;
    if (stage1_lr) c.stage1.learning_rate = *stage1_lr;
    if (ablate_mmd) c.disentangler.weights.di = 0.0;
    if (reg) c.regularizer.kind = parse_reg_kind(*reg);
    if (alpha) c.regularizer.alpha = *alpha;
    if (k) c.regularizer.k = *k;
    if (epochs) c.stage2.epochs = *epochs;
    if (decay_epoch) c.stage2.lr_decay_epoch = *decay_epoch;
    if (batch_size) c.stage2.batch_size = *batch_size;
    if (lr) c.stage2.base_lr = *lr;
    if (num_seeds) c.num_seeds = *num_seeds;
    const bool beta_in_file = file.contains("regularizer") && file["regularizer"].contains("beta");
    if (beta) {
      c.regularizer.beta = *beta;
    } else if (!beta_in_file) {
      c.regularizer.beta = c.regularizer.kind == RegKind::kNone ? 0.0 : 1e-4;
    }
    if (!uses_alpha(c.regularizer.kind)) c.regularizer.alpha = 0.0;
    c.validate();
    return c;
  }
};

void require(const fs::path& p, const char* what) {
  if (p.empty()) throw UsageError(std::string("missing ") + what);
}

LabeledImages load_images(const fs::path& root, const std::string& split, const TransformConfig& transform) {
  DatasetSpec spec;
  spec.root = root;
  spec.split = split;
  spec.transform = transform;
  return load_dataset(spec);
}

TensorDataset load_train(const ExperimentConfig& c, uint64_t seed) {
  require(c.train_dir, "--train");
  auto images = load_images(c.train_dir, "train", c.transform);
  if (c.sample_rate < 1.0) {
    const auto m = subsample_per_class(images.manifest, c.sample_rate, SeedPlan{seed}.data());
    images = select_entries(images, m);
  }
  return prepare_dataset(images, c.transform);
}

ModelAdapter load_source(const ExperimentConfig& c) {
  require(c.source_checkpoint, "--source");
  auto m = ModelAdapter::load(c.source_checkpoint);
  m.freeze();
  return m;
}

// What the current invocation reports to the run index; main appends it
// once with the outcome, whether the command succeeded or not.
struct RunInfo {
  std::string command;
  std::string config_hash;
  fs::path output_dir;
  nlohmann::json extra = nlohmann::json::object();
};
RunInfo g_run;

void append_index(const std::string& outcome) {
  if (g_run.command.empty()) return;
  nlohmann::json e = g_run.extra;
  e["command"] = g_run.command;
  e["config_hash"] = g_run.config_hash;
  e["output_dir"] = g_run.output_dir.string();
  e["outcome"] = outcome;
  e["time"] = std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
                  .count();
  try {
    append_run_index(e);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "warning: run index not updated: %s\n", ex.what());
  }
}

// "data/cub/train" -> "cub"; other paths use their last component.
std::string dataset_name(const fs::path& dir) {
  fs::path p = dir.filename().empty() ? dir.parent_path() : dir;
  const auto last = p.filename().string();
  if ((last == "train" || last == "test") && p.has_parent_path()) return p.parent_path().filename().string();
  return last;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("not a number: '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("empty list");
  return out;
}

// --- make-synthetic ---------------------------------------------------------

struct SyntheticFlags {
  fs::path out;
  int64_t source_train = 300, source_test = 60, target_train = 30, target_test = 50;
  uint64_t seed = 0;
};

int cmd_make_synthetic(const SyntheticFlags& f) {
  DeskTaskConfig dc;
  const std::vector<int> source_ids(kSourceClassIds.begin(), kSourceClassIds.end());
  const auto target_ids = target_class_ids();
  const auto write = [&](const std::vector<int>& ids, int64_t per_class, uint64_t offset, const fs::path& dir) {
    SyntheticImageSpec spec;
    spec.class_ids = ids;
    spec.images_per_class = per_class;
    spec.image_size = dc.image_size;
    spec.clutter = dc.clutter;
    spec.pixel_noise = dc.pixel_noise;
    spec.seed = f.seed * 4 + offset;
    write_class_directory(generate_shape_texture_images(spec), dir);
  };
  write(source_ids, f.source_train, 1, f.out / "source" / "train");
  write(source_ids, f.source_test, 2, f.out / "source" / "test");
  write(target_ids, f.target_train, 3, f.out / "target" / "train");
  write(target_ids, f.target_test, 4, f.out / "target" / "test");
  std::printf("wrote %s/{source,target}/{train,test}\n", f.out.string().c_str());
  return 0;
}

// --- pretrain ---------------------------------------------------------------

struct PretrainFlags {
  fs::path train, test, out;
  std::vector<int64_t> widths{16, 32, 64, 128};
  int64_t epochs = 12, decay_epoch = 8, batch_size = 64;
  double lr = 0.05, weight_decay = 5e-4;
  uint64_t seed = 0;
};

int cmd_pretrain(const PretrainFlags& f) {
  TransformConfig transform;
  auto train = prepare_dataset(load_images(f.train, "train", transform), transform);
  std::optional<TensorDataset> test;
  if (!f.test.empty()) test = prepare_dataset(load_images(f.test, "test", transform), transform);
  BackboneSpec spec;
  spec.widths = f.widths;
  spec.num_classes = train.num_classes;
  spec.seed = f.seed;
  TrainingSchedule s;
  s.epochs = f.epochs;
  s.lr_decay_epoch = f.decay_epoch;
  s.batch_size = f.batch_size;
  s.base_lr = f.lr;
  s.seed = f.seed;
  PretrainOptions opt;
  opt.weight_decay = f.weight_decay;
  auto r = pretrain_source(spec, train, test ? &*test : nullptr, s, opt);
  save_source(r, f.out);
  g_run.config_hash = spec.hash();
  g_run.output_dir = f.out.parent_path();
  g_run.extra["test_top1"] = r.test_top1;
  std::printf("source checkpoint %s: train top-1 %.2f, test top-1 %.2f\n", f.out.string().c_str(), r.train_top1,
              r.test_top1);
  return 0;
}

// --- disentangle ------------------------------------------------------------

int cmd_disentangle(const ConfigFlags& flags) {
  auto c = flags.build();
  auto source = load_source(c);
  auto train = load_train(c, c.seed);
  const SeedPlan seeds{c.seed};
  DisentanglerConfig dcfg = c.disentangler;
  dcfg.channels = source.transfer_channels();
  dcfg.layer_id = source.transfer_layer_id();
  dcfg.seed = seeds.stage1();
  c.disentangler = dcfg;
  const auto hash = c.hash();
  const auto dir = prepare_output_dir(c.output_dir, "disentangle", hash, flags.force);
  g_run.config_hash = hash;
  g_run.output_dir = dir;
  g_run.extra["mmd_ablated"] = dcfg.weights.di == 0.0;
  DisentanglerState state(dcfg);
  AuxClassifier clf(dcfg.channels, train.num_classes, seeds.stage1() + 1);
  DisentanglerSchedule schedule = c.stage1;
  schedule.seed = seeds.stage1();
  auto curve = train_disentangler(train, source, state, clf, schedule);
  save_disentangler(state, dir / "disentangler.pt", curve, schedule.epochs);
  write_file_atomic(dir / "curve.json", curve.to_json().dump(2) + "\n");
  write_file_atomic(dir / "config.json", c.to_json().dump(2) + "\n");
  const auto& last = curve.epochs.back();
  std::printf("disentangler %s: mmd2 %.4f -> %.4f, L_re %.4f -> %.4f\n", (dir / "disentangler.pt").c_str(),
              curve.initial.mmd2, last.mmd2, curve.initial.re, last.re);
  return 0;
}

// --- finetune ---------------------------------------------------------------

int cmd_finetune(const ConfigFlags& flags, bool eval_each_epoch) {
  auto c = flags.build();
  if (c.regularizer.kind == RegKind::kTRED && c.disentangler_checkpoint.empty()) {
    throw UsageError("--reg tred requires --disentangler <checkpoint>");
  }
  require(c.test_dir, "--test");
  auto source = load_source(c);
  const auto hash = c.hash();
  g_run.config_hash = hash;
  const auto dir = prepare_output_dir(c.output_dir, "finetune", hash, flags.force);
  g_run.output_dir = dir;
  write_file_atomic(dir / "config.json", c.to_json().dump(2) + "\n");
  auto test = prepare_dataset(load_images(c.test_dir, "test", c.transform), c.transform);
  std::optional<DisentanglerState> dis;
  if (c.regularizer.kind == RegKind::kTRED) dis.emplace(load_disentangler(c.disentangler_checkpoint));

  std::vector<double> acc;
  for (int64_t i = 0; i < c.num_seeds; ++i) {
    const uint64_t seed = c.seed + static_cast<uint64_t>(i);
    const SeedPlan plan{seed};
    auto train = load_train(c, seed);
    RegularizerConfig reg = c.regularizer;
    if (reg.kind == RegKind::kDELTA && !reg.channel_weights) {
      reg.channel_weights = delta_channel_weights(source, train, plan.stage1());
    }
    TrainingSchedule schedule = c.stage2;
    schedule.seed = plan.stage2();
    FinetuneOptions opt;
    opt.dataset_name = dataset_name(c.train_dir);
    opt.metrics_path = dir / ("metrics-" + std::to_string(seed) + ".jsonl");
    opt.eval_each_epoch = eval_each_epoch;
    auto r = finetune(train, &test, source, reg, dis ? &*dis : nullptr, schedule, opt);
    r.record.seed = seed;
    r.record.config_hash = hash;
    if (dis && dis->mmd_ablated()) r.record.method = "TRED-";
    r.model.save(dir / ("model-" + std::to_string(seed) + ".pt"), {{"config_hash", hash}, {"seed", seed}});
    write_file_atomic(dir / ("record-" + std::to_string(seed) + ".json"), r.record.to_json().dump(2) + "\n");
    std::printf("%s alpha=%g seed=%llu: top-1 %.2f\n", r.record.method.c_str(), reg.alpha,
                static_cast<unsigned long long>(seed), r.record.final_top1);
    acc.push_back(r.record.final_top1);
  }
  const auto s = summarize(acc);
  nlohmann::json agg{{"method", to_string(c.regularizer.kind)}, {"alpha", c.regularizer.alpha},
                     {"mean", s.mean},  {"std", s.std},  {"std_kind", "sample"},
                     {"n_seeds", s.n},  {"top1", acc}};
  write_file_atomic(dir / "aggregate.json", agg.dump(2) + "\n");
  std::printf("mean top-1 %.2f +- %.2f over %zu seed(s); outputs in %s\n", s.mean, s.std, s.n, dir.c_str());
  g_run.extra["mean_top1"] = s.mean;
  return 0;
}

// --- evaluate ---------------------------------------------------------------

int cmd_evaluate(const fs::path& model_path, const fs::path& data_dir) {
  auto model = ModelAdapter::load(model_path);
  TransformConfig transform;
  auto data = prepare_dataset(load_images(data_dir, "test", transform), transform);
  if (data.num_classes != model.num_classes()) {
    throw InvalidInput("model has " + std::to_string(model.num_classes()) + " classes, data has " +
                       std::to_string(data.num_classes));
  }
  g_run.config_hash = model.parameter_hash();
  g_run.output_dir = model_path.parent_path();
  const double top1 = evaluate(model, data);
  g_run.extra["top1"] = top1;
  std::printf("top-1 %.2f on %lld images\n", top1, static_cast<long long>(data.size()));
  return 0;
}

// --- analyze ----------------------------------------------------------------

struct AnalyzeFlags {
  fs::path model, data, disentangler, out, image, runs, source_train, source_test, target_model;
  std::string variant = "original", backend = "pca", transform = "identity";
  int64_t limit = 256;
  bool population_std = false;
};

// Transfer-layer feature maps of the first `limit` examples (centre crops).
FeatureMap feature_maps(const ModelAdapter& model, const TensorDataset& data, int64_t limit) {
  torch::NoGradGuard guard;
  model.eval();
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < std::min(limit, data.size()); ++i) idx.push_back(i);
  std::mt19937_64 rng(0);
  auto batch = make_batch(data, idx, false, rng);
  return model.forward(batch.inputs).features;
}

FeatureMap apply_variant(const FeatureMap& fm, const std::string& variant, const fs::path& dis_path) {
  if (variant == "original") return fm;
  if (variant != "positive") throw UsageError("--variant must be original or positive");
  if (dis_path.empty()) throw UsageError("--variant positive requires --disentangler");
  auto dis = load_disentangler(dis_path);
  torch::NoGradGuard guard;
  return disentangle(fm, dis).first;
}

int cmd_spectrum(const AnalyzeFlags& f) {
  g_run.output_dir = f.out;
  auto model = ModelAdapter::load(f.model);
  TransformConfig transform;
  auto data = prepare_dataset(load_images(f.data, "test", transform), transform);
  auto fm = apply_variant(feature_maps(model, data, f.limit), f.variant, f.disentangler);
  auto report = singular_spectrum(flatten_features(fm), model.transfer_layer_id(),
                                  f.variant == "positive" ? SpectrumVariant::kPositive : SpectrumVariant::kOriginal);
  write_file_atomic(f.out, report.to_json().dump(2) + "\n");
  std::printf("%zu singular values, bottom-quartile energy %.6g -> %s\n", report.sigmas.size(),
              bottom_quartile_energy(report), f.out.c_str());
  return 0;
}

int cmd_embed(const AnalyzeFlags& f) {
  g_run.output_dir = f.out;
  auto model = ModelAdapter::load(f.model);
  TransformConfig transform;
  auto data = prepare_dataset(load_images(f.data, "test", transform), transform);
  auto fm = apply_variant(feature_maps(model, data, f.limit), f.variant, f.disentangler);
  auto desc = reduce_spatialwise(fm).data().to(torch::kDouble);
  std::vector<int64_t> labels;
  for (int64_t i = 0; i < desc.size(0); ++i) labels.push_back(data.labels[i].item<int64_t>());
  auto emb = embed_2d(desc, labels, f.backend == "tsne" ? EmbedBackend::kTsneIfAvailable : EmbedBackend::kPca);
  emb.save_csv(f.out);
  std::printf("%lld points (%s), silhouette %.4f -> %s\n", static_cast<long long>(desc.size(0)), emb.backend.c_str(),
              silhouette_score(emb.points, emb.labels), f.out.c_str());
  return 0;
}

int cmd_overlay(const AnalyzeFlags& f) {
  g_run.output_dir = f.out;
  auto model = ModelAdapter::load(f.model);
  const Image img = read_image(f.image);
  TransformConfig transform;
  auto x = transform_eval(img, transform).unsqueeze(0);
  FeatureMap fm = [&] {
    torch::NoGradGuard guard;
    model.eval();
    return model.forward(x).features;
  }();
  fm = apply_variant(fm, f.variant, f.disentangler);
  auto r = attention_overlay(img, fm, f.out);
  std::printf("overlay %s%s\n", f.out.c_str(), r.zero_attention ? " (zero attention)" : "");
  return 0;
}

int cmd_sweep(const ConfigFlags& flags, const std::string& method, const std::string& alphas_text) {
  auto c = flags.build();
  require(c.test_dir, "--test");
  const auto alphas = parse_list(alphas_text);
  const auto kind = parse_reg_kind(method);
  auto source = load_source(c);
  TransferSetup setup;
  setup.train = load_train(c, c.seed);
  setup.test = prepare_dataset(load_images(c.test_dir, "test", c.transform), c.transform);
  setup.schedule = c.stage2;
  setup.stage1 = c.stage1;
  setup.weights = c.disentangler.weights;
  setup.hidden_ratio = c.disentangler.hidden_ratio;
  setup.beta = c.regularizer.beta;
  TransferRunner runner(source, setup);
  std::vector<uint64_t> seeds;
  for (int64_t i = 0; i < c.num_seeds; ++i) seeds.push_back(c.seed + static_cast<uint64_t>(i));
  const auto hash = c.hash();
  g_run.config_hash = hash;
  const auto dir = prepare_output_dir(c.output_dir, "sweep-" + method, hash, flags.force);
  g_run.output_dir = dir;
  g_run.extra["method"] = method;
  auto s = alpha_sweep(runner, kind, alphas, seeds);
  write_file_atomic(dir / "sweep.json", s.to_json().dump(2) + "\n");
  for (size_t i = 0; i < s.records.size(); ++i) {
    write_file_atomic(dir / ("record-" + std::to_string(i) + ".json"), s.records[i].to_json().dump(2) + "\n");
  }
  for (size_t i = 0; i < s.alphas.size(); ++i) {
    std::printf("alpha %-8g top-1 %.2f +- %.2f\n", s.alphas[i], s.means[i], s.stds[i]);
  }
  std::printf("best minus largest-alpha: %.2f; outputs in %s\n", s.drop_to_last(), dir.c_str());
  return 0;
}

int cmd_table(const AnalyzeFlags& f) {
  g_run.output_dir = f.out;
  const auto records = load_run_records(f.runs);
  if (records.empty()) throw MissingArtifact("no record*.json files under " + f.runs.string());
  auto table = results_table(records, !f.population_std);
  std::cout << table.to_text();
  if (!f.out.empty()) {
    write_file_atomic(f.out, table.to_csv());
    std::printf("csv -> %s\n", f.out.c_str());
  } else {
    std::cout << table.to_csv();
  }
  return 0;
}

int cmd_retention(const AnalyzeFlags& f) {
  auto source = ModelAdapter::load(f.model);
  TransformConfig transform;
  auto train = prepare_dataset(load_images(f.source_train, "train", transform), transform);
  auto test = prepare_dataset(load_images(f.source_test, "test", transform), transform);
  const auto kind = parse_retention_transform(f.transform);
  std::optional<DisentanglerState> dis;
  std::optional<ModelAdapter> target;
  if (kind == RetentionTransform::kDisentanglerPositive) {
    if (f.disentangler.empty()) throw UsageError("--transform positive requires --disentangler");
    dis.emplace(load_disentangler(f.disentangler));
  }
  if (kind == RetentionTransform::kTransformOnly) {
    if (f.target_model.empty()) throw UsageError("--transform transform-only requires --target-model");
    target = ModelAdapter::load(f.target_model);
  }
  const double top1 = source_retention_probe(kind, train, test, source, dis ? &*dis : nullptr,
                                             target ? &*target : nullptr);
  std::printf("source retention (%s): top-1 %.2f\n", f.transform.c_str(), top1);
  g_run.extra["top1"] = top1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tred: transfer learning with disentangled feature regularization"};
  app.require_subcommand(1);
  std::string level = "info";
  int threads = 0;
  app.add_option("--log-level", level, "debug, info, warn, error or off");
  app.add_option("--threads", threads, "Intra-op threads (0: library default)");

  SyntheticFlags syn;
  auto* make_syn = app.add_subcommand("make-synthetic", "Write the synthetic source/target image folders");
  make_syn->add_option("--out", syn.out, "Output root")->required();
  make_syn->add_option("--source-train", syn.source_train, "Source training images per class");
  make_syn->add_option("--source-test", syn.source_test, "Source test images per class");
  make_syn->add_option("--target-train", syn.target_train, "Target training images per class");
  make_syn->add_option("--target-test", syn.target_test, "Target test images per class");
  make_syn->add_option("--seed", syn.seed, "Generator seed");

  PretrainFlags pre;
  auto* pretrain = app.add_subcommand("pretrain", "Train a source backbone from scratch");
  pretrain->add_option("--train", pre.train, "Training images")->required()->check(CLI::ExistingDirectory);
  pretrain->add_option("--test", pre.test, "Test images")->check(CLI::ExistingDirectory);
  pretrain->add_option("--out", pre.out, "Checkpoint path")->required();
  pretrain->add_option("--widths", pre.widths, "Stage widths")->delimiter(',');
  pretrain->add_option("--epochs", pre.epochs, "Epochs");
  pretrain->add_option("--decay-epoch", pre.decay_epoch, "Learning-rate drop epoch");
  pretrain->add_option("--batch-size", pre.batch_size, "Mini-batch size");
  pretrain->add_option("--lr", pre.lr, "Base learning rate");
  pretrain->add_option("--weight-decay", pre.weight_decay, "Weight decay");
  pretrain->add_option("--seed", pre.seed, "Seed");

  ConfigFlags dis_flags;
  auto* dis = app.add_subcommand("disentangle", "Stage 1: train the disentangler on target data");
  dis_flags.add_data(dis);
  dis_flags.add_stage1(dis);

  ConfigFlags ft_flags;
  bool eval_each_epoch = false;
  auto* ft = app.add_subcommand("finetune", "Stage 2: fine-tune with a regularizer");
  ft_flags.add_data(ft);
  ft_flags.add_stage2(ft);
  ft->add_flag("--eval-each-epoch", eval_each_epoch, "Record test accuracy after every epoch");

  fs::path eval_model, eval_data;
  auto* ev = app.add_subcommand("evaluate", "Top-1 accuracy of a checkpoint");
  ev->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data, "Images (one directory per class)")->required()->check(CLI::ExistingDirectory);

  auto* an = app.add_subcommand("analyze", "Analysis reports and plots");
  an->require_subcommand(1);
  AnalyzeFlags af;
  auto* spectrum = an->add_subcommand("spectrum", "Singular values of the batch feature matrix (JSON)");
  auto* embed = an->add_subcommand("embed", "2-D embedding of pooled features (CSV)");
  for (auto* cmd : {spectrum, embed}) {
    cmd->add_option("--model", af.model, "Checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--data", af.data, "Images")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--variant", af.variant, "original or positive");
    cmd->add_option("--disentangler", af.disentangler, "Disentangler checkpoint (positive variant)");
    cmd->add_option("--limit", af.limit, "Number of examples");
    cmd->add_option("--out", af.out, "Output file")->required();
  }
  embed->add_option("--backend", af.backend, "pca or tsne (falls back to pca)");
  auto* overlay = an->add_subcommand("overlay", "Attention heatmap over an image (PNG/PPM)");
  overlay->add_option("--model", af.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  overlay->add_option("--image", af.image, "Input image")->required()->check(CLI::ExistingFile);
  overlay->add_option("--variant", af.variant, "original or positive");
  overlay->add_option("--disentangler", af.disentangler, "Disentangler checkpoint (positive variant)");
  overlay->add_option("--out", af.out, "Output image")->required();

  ConfigFlags sweep_flags;
  std::string sweep_method, sweep_alphas = "0.001,0.01,0.1,1";
  auto* sweep = an->add_subcommand("sweep", "Accuracy across regularization strengths");
  sweep_flags.add_data(sweep);
  sweep_flags.add_stage2(sweep);
  sweep->add_option("--method", sweep_method, "Regularizer")->required();
  sweep->add_option("--alphas", sweep_alphas, "Comma-separated strengths");

  auto* table = an->add_subcommand("table", "Mean and std per dataset and method");
  table->add_option("--runs", af.runs, "Directory searched for record*.json")->required()->check(CLI::ExistingDirectory);
  table->add_option("--out", af.out, "CSV output (default: stdout)");
  table->add_flag("--population-std", af.population_std, "Population instead of sample std");

  auto* retention = an->add_subcommand("retention", "Linear probe of source-task knowledge");
  retention->add_option("--source", af.model, "Source checkpoint")->required()->check(CLI::ExistingFile);
  retention->add_option("--source-train", af.source_train, "Source training images")->required();
  retention->add_option("--source-test", af.source_test, "Source test images")->required();
  retention->add_option("--transform", af.transform, "identity, positive or transform-only");
  retention->add_option("--disentangler", af.disentangler, "Disentangler checkpoint");
  retention->add_option("--target-model", af.target_model, "Fine-tuned checkpoint (transform-only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  for (const auto* sub : app.get_subcommands()) {
    g_run.command = sub->get_name();
    for (const auto* inner : sub->get_subcommands()) g_run.command += " " + inner->get_name();
  }
  int code = kUsage;
  try {
    log::set_level(log::parse_level(level));
    if (threads > 0) torch::set_num_threads(threads);
    if (*make_syn) code = cmd_make_synthetic(syn);
    else if (*pretrain) code = cmd_pretrain(pre);
    else if (*dis) code = cmd_disentangle(dis_flags);
    else if (*ft) code = cmd_finetune(ft_flags, eval_each_epoch);
    else if (*ev) code = cmd_evaluate(eval_model, eval_data);
    else if (*spectrum) code = cmd_spectrum(af);
    else if (*embed) code = cmd_embed(af);
    else if (*overlay) code = cmd_overlay(af);
    else if (*sweep) code = cmd_sweep(sweep_flags, sweep_method, sweep_alphas);
    else if (*table) code = cmd_table(af);
    else if (*retention) code = cmd_retention(af);
    append_index(code == 0 ? "ok" : "failed");
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    append_index(std::string("usage error: ") + e.what());
    return kUsage;
  } catch (const InvalidInput& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    append_index(std::string("invalid input: ") + e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    append_index(std::string("error: ") + e.what());
    return kRuntime;
  }
  return code;
}
