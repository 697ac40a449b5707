#include "tred/finetune.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tred/error.hpp"
#include "tred/hashing.hpp"
#include "tred/log.hpp"

namespace tred {

namespace {

double scalar(const torch::Tensor& t) { return t.detach().to(torch::kDouble).item<double>(); }

void set_lr(torch::optim::Optimizer& optimizer, double lr) {
  for (auto& group : optimizer.param_groups()) {
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
  }
}

}  // namespace

void TrainingSchedule::validate() const {
  if (epochs < 1 || batch_size < 1 || !(base_lr > 0.0) || momentum < 0.0 || lr_decay_epoch < 1 ||
      !(lr_decay_factor > 0.0)) {
    throw InvalidInput("TrainingSchedule: values must be positive");
  }
  if (lr_decay_epoch > epochs) throw InvalidInput("TrainingSchedule: lr_decay_epoch exceeds epochs");
}

nlohmann::json TrainingSchedule::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size},
          {"base_lr", base_lr},     {"momentum", momentum},
          {"lr_decay_epoch", lr_decay_epoch}, {"lr_decay_factor", lr_decay_factor},
          {"seed", seed}};
}

TrainingSchedule TrainingSchedule::from_json(const nlohmann::json& j) {
  TrainingSchedule s;
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.base_lr = j.value("base_lr", s.base_lr);
  s.momentum = j.value("momentum", s.momentum);
  s.lr_decay_epoch = j.value("lr_decay_epoch", s.lr_decay_epoch);
  s.lr_decay_factor = j.value("lr_decay_factor", s.lr_decay_factor);
  s.seed = j.value("seed", s.seed);
  return s;
}

double learning_rate_at(const TrainingSchedule& schedule, int64_t epoch) {
  return epoch >= schedule.lr_decay_epoch ? schedule.base_lr * schedule.lr_decay_factor : schedule.base_lr;
}

torch::Tensor regularizer_penalty(const RegularizerConfig& reg, const ModelAdapter& target,
                                  const FeatureMap& fm_target, const torch::Tensor& inputs,
                                  const ModelAdapter* source, const DisentanglerState* dis) {
  const auto needs_source = [&] {
    if (source == nullptr || !source->valid()) {
      throw MissingArtifact(to_string(reg.kind) + " needs the frozen source model");
    }
  };
  const auto head_decay = [&] { return l2_penalty(target.head_parameters(), reg.beta); };
  const auto source_features = [&] {
    torch::NoGradGuard guard;
    return source->forward(inputs).features.detached();
  };

  switch (reg.kind) {
    case RegKind::kNone:
      return torch::zeros({}, fm_target.data().options().requires_grad(false));
    case RegKind::kL2:
      return l2_penalty(target.parameters(), reg.beta);
    case RegKind::kL2SP:
      needs_source();
      return l2sp_penalty(target.backbone_parameters(), source->backbone_parameters(),
                          target.head_parameters(), reg.alpha, reg.beta);
    case RegKind::kAT:
      needs_source();
      return at_penalty(fm_target, source_features(), reg.alpha) + head_decay();
    case RegKind::kDELTA: {
      needs_source();
      if (!reg.channel_weights) throw MissingArtifact("DELTA needs channel weights");
      return delta_penalty(fm_target, source_features(), *reg.channel_weights, reg.alpha) + head_decay();
    }
    case RegKind::kBSS:
      return bss_penalty(flatten_features(fm_target), reg.k, reg.alpha) + head_decay();
    case RegKind::kTRED: {
      needs_source();
      if (dis == nullptr) throw MissingArtifact("TRED needs a trained disentangler");
      FeatureMap fm_pos;
      {
        torch::NoGradGuard guard;
        fm_pos = disentangle(source_features(), *dis).first.detached();
      }
      return tred_penalty(fm_target, fm_pos, reg.alpha) + head_decay();
    }
  }
  throw InvalidInput("unhandled regularizer kind");
}

LossBreakdown srm_step(const Batch& batch, ModelAdapter& target, const ModelAdapter* source,
                       const RegularizerConfig& reg, const DisentanglerState* dis,
                       torch::optim::Optimizer& optimizer) {
  if (reg.kind == RegKind::kTRED && dis == nullptr) {
    throw MissingArtifact("TRED needs a trained disentangler");
  }
  target.train();
  auto out = target.forward(batch.inputs);
  auto ce = torch::nn::functional::cross_entropy(out.logits, batch.labels);
  auto penalty = regularizer_penalty(reg, target, out.features, batch.inputs, source, dis);
  auto total = ce + penalty;

  LossBreakdown losses{scalar(ce), scalar(penalty), scalar(total)};
  if (!std::isfinite(losses.total)) {
    throw DivergenceError("srm_step: non-finite loss (ce=" + std::to_string(losses.ce) +
                          ", penalty=" + std::to_string(losses.penalty) + ")");
  }
  optimizer.zero_grad();
  total.backward();
  optimizer.step();
  return losses;
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json row{{"epoch", e.epoch}, {"lr", e.lr}, {"ce", e.ce}, {"penalty", e.penalty},
                       {"train_loss", e.train_loss}};
    row["eval_top1"] = e.eval_top1 ? nlohmann::json(*e.eval_top1) : nlohmann::json(nullptr);
    epochs_json.push_back(row);
  }
  return {{"config_hash", config_hash}, {"dataset", dataset},       {"method", method},
          {"alpha", alpha},             {"seed", seed},             {"epochs", epochs_json},
          {"final_top1", final_top1},   {"wall_seconds", wall_seconds}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.config_hash = j.value("config_hash", std::string{});
  r.dataset = j.value("dataset", std::string{});
  r.method = j.value("method", std::string{});
  r.alpha = j.value("alpha", 0.0);
  r.seed = j.value("seed", uint64_t{0});
  r.final_top1 = j.at("final_top1").get<double>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
  for (const auto& row : j.value("epochs", nlohmann::json::array())) {
    EpochMetrics e;
    e.epoch = row.at("epoch").get<int64_t>();
    e.lr = row.at("lr").get<double>();
    e.ce = row.at("ce").get<double>();
    e.penalty = row.at("penalty").get<double>();
    e.train_loss = row.at("train_loss").get<double>();
    if (row.contains("eval_top1") && !row.at("eval_top1").is_null()) e.eval_top1 = row.at("eval_top1").get<double>();
    r.epochs.push_back(e);
  }
  if (r.final_top1 < 0.0 || r.final_top1 > 100.0) throw InvalidInput("RunRecord: accuracy outside [0, 100]");
  return r;
}

bool RunRecord::same_metrics(const RunRecord& other) const {
  return config_hash == other.config_hash && dataset == other.dataset && method == other.method &&
         alpha == other.alpha && seed == other.seed && epochs == other.epochs &&
         final_top1 == other.final_top1;
}

FinetuneResult finetune(const TensorDataset& train, const TensorDataset* eval, const ModelAdapter& source,
                        const RegularizerConfig& reg, const DisentanglerState* dis,
                        const TrainingSchedule& schedule, const FinetuneOptions& options) {
  if (train.empty()) throw InvalidInput("finetune: empty dataset");
  schedule.validate();
  reg.validate();
  if (reg.kind == RegKind::kTRED && dis == nullptr) throw MissingArtifact("TRED needs a trained disentangler");
  const auto start = std::chrono::steady_clock::now();

  source.eval();
  ModelAdapter target = source.with_fresh_head(train.num_classes, schedule.seed);
  for (auto& p : target.parameters()) p.set_requires_grad(true);
  target.train();

  torch::optim::SGD optimizer(target.parameters(),
                              torch::optim::SGDOptions(schedule.base_lr).momentum(schedule.momentum));

  std::optional<std::ofstream> metrics;
  if (options.metrics_path) {
    if (options.metrics_path->has_parent_path()) {
      std::filesystem::create_directories(options.metrics_path->parent_path());
    }
    metrics.emplace(*options.metrics_path);
  }

  RunRecord record;
  record.dataset = options.dataset_name;
  record.method = to_string(reg.kind);
  record.alpha = reg.alpha;
  record.seed = schedule.seed;
  record.config_hash = hash_hex(nlohmann::json{{"reg", reg.to_json()},
                                               {"schedule", schedule.to_json()},
                                               {"source", source.spec().hash()},
                                               {"train", train.content_hash()}}
                                    .dump());

  std::mt19937_64 rng(schedule.seed * 0x9e3779b97f4a7c15ULL + 1);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = learning_rate_at(schedule, epoch);
    set_lr(optimizer, lr);
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    double batches = 0.0;
    for (const auto& idx : shuffled_batches(train.size(), schedule.batch_size, rng)) {
      auto batch = make_batch(train, idx, /*train=*/true, rng);
      auto losses = srm_step(batch, target, &source, reg, dis, optimizer);
      em.ce += losses.ce;
      em.penalty += losses.penalty;
      em.train_loss += losses.total;
      batches += 1.0;
      if (metrics) {
        *metrics << nlohmann::json{{"epoch", epoch}, {"step", step}, {"ce", losses.ce},
                                   {"penalty", losses.penalty}, {"total", losses.total}, {"lr", lr}}
                        .dump()
                 << "\n";
      }
      ++step;
    }
    em.ce /= batches;
    em.penalty /= batches;
    em.train_loss /= batches;
    if (eval != nullptr && options.eval_each_epoch) em.eval_top1 = evaluate(target, *eval);
    log::debug(log::format("%s epoch %lld: lr=%g loss=%.4f penalty=%.4f", record.method.c_str(),
                            static_cast<long long>(epoch), lr, em.train_loss, em.penalty));
    record.epochs.push_back(em);
  }

  target.eval();
  if (eval != nullptr) {
    record.final_top1 = (options.eval_each_epoch && !record.epochs.empty())
                            ? *record.epochs.back().eval_top1
                            : evaluate(target, *eval);
  }
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(target), std::move(record)};
}

double evaluate(const ModelAdapter& model, const TensorDataset& data, int64_t batch_size) {
  if (data.empty()) throw InvalidInput("evaluate: empty dataset");
  torch::NoGradGuard guard;
  const bool was_training = model.net().is_training();
  model.eval();
  std::mt19937_64 rng(0);
  int64_t correct = 0;
  for (const auto& idx : sequential_batches(data.size(), batch_size)) {
    auto batch = make_batch(data, idx, /*train=*/false, rng);
    auto pred = model.forward(batch.inputs).logits.argmax(1);
    correct += pred.eq(batch.labels).sum().item<int64_t>();
  }
  model.train(was_training);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

AccuracySummary summarize(const std::vector<double>& values, bool sample_std) {
  if (values.empty()) throw InvalidInput("summarize: empty group");
  AccuracySummary s;
  s.n = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(sample_std ? s.n - 1 : s.n));
  }
  return s;
}

}  // namespace tred
