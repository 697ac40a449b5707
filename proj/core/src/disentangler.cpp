#include "tred/disentangler.hpp"

#include <cmath>
#include <fstream>

#include <ATen/CPUGeneratorImpl.h>

#include "tred/error.hpp"
#include "tred/hashing.hpp"
#include "tred/log.hpp"

namespace tred {

namespace nn = torch::nn;

namespace {

nn::Sequential make_head(int64_t channels, int64_t hidden, at::Generator& gen) {
  nn::Sequential head(nn::Conv2d(nn::Conv2dOptions(channels, hidden, 1)), nn::ReLU(),
                      nn::Conv2d(nn::Conv2dOptions(hidden, channels, 1)));
  torch::NoGradGuard guard;
  for (auto& item : head->named_parameters()) {
    auto& p = item.value();
    if (p.dim() == 4) {
      p.normal_(0.0, std::sqrt(1.0 / static_cast<double>(p.size(1))), gen);
    } else {
      p.zero_();
    }
  }
  return head;
}

double item(const torch::Tensor& t) { return t.detach().to(torch::kDouble).item<double>(); }

}  // namespace

void DisentanglerConfig::validate() const {
  if (channels < 1) throw InvalidInput("DisentanglerConfig: channels must be positive");
  if (!(hidden_ratio > 0.0)) throw InvalidInput("DisentanglerConfig: hidden_ratio must be positive");
  if (weights.di < 0.0 || weights.re < 0.0 || weights.ce < 0.0) {
    throw InvalidInput("DisentanglerConfig: loss weights must be non-negative");
  }
}

int64_t DisentanglerConfig::hidden_channels() const {
  return std::max<int64_t>(1, static_cast<int64_t>(std::lround(static_cast<double>(channels) * hidden_ratio)));
}

nlohmann::json DisentanglerConfig::to_json() const {
  return {{"channels", channels},     {"hidden_ratio", hidden_ratio}, {"lambda_di", weights.di},
          {"lambda_re", weights.re},  {"lambda_ce", weights.ce},      {"layer_id", layer_id},
          {"seed", seed}};
}

DisentanglerConfig DisentanglerConfig::from_json(const nlohmann::json& j) {
  DisentanglerConfig c;
  c.channels = j.value("channels", c.channels);
  c.hidden_ratio = j.value("hidden_ratio", c.hidden_ratio);
  c.weights.di = j.value("lambda_di", c.weights.di);
  c.weights.re = j.value("lambda_re", c.weights.re);
  c.weights.ce = j.value("lambda_ce", c.weights.ce);
  c.layer_id = j.value("layer_id", c.layer_id);
  c.seed = j.value("seed", c.seed);
  return c;
}

DisentanglerNetImpl::DisentanglerNetImpl(const DisentanglerConfig& cfg) {
  cfg.validate();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
  positive_ = register_module("positive", make_head(cfg.channels, cfg.hidden_channels(), gen));
  negative_ = register_module("negative", make_head(cfg.channels, cfg.hidden_channels(), gen));
}

std::pair<torch::Tensor, torch::Tensor> DisentanglerNetImpl::forward(const torch::Tensor& fm) {
  return {positive_->forward(fm), negative_->forward(fm)};
}

AuxClassifierImpl::AuxClassifierImpl(int64_t channels, int64_t num_classes, uint64_t seed)
    : num_classes_(num_classes) {
  if (channels < 1 || num_classes < 1) throw InvalidInput("AuxClassifier: bad extents");
  fc_ = register_module("fc", nn::Linear(channels, num_classes));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed ^ 0x5bd1e995ULL);
  torch::NoGradGuard guard;
  fc_->weight.normal_(0.0, std::sqrt(1.0 / static_cast<double>(channels)), gen);
  fc_->bias.zero_();
}

torch::Tensor AuxClassifierImpl::forward(const ChannelDescriptor& pooled) { return fc_(pooled.data()); }

DisentanglerState::DisentanglerState(DisentanglerConfig cfg)
    : config(std::move(cfg)), net(DisentanglerNet(config)) {}

void DisentanglerState::freeze() const {
  net->eval();
  for (auto& p : net->parameters()) p.set_requires_grad(false);
}

std::string DisentanglerState::parameter_hash() const {
  ContentHash h;
  for (const auto& item : net->named_parameters()) {
    h.update(item.key());
    h.update(item.value());
  }
  return h.hex();
}

std::pair<FeatureMap, FeatureMap> disentangle(const FeatureMap& fm_ori, const DisentanglerState& state) {
  if (fm_ori.channels() != state.config.channels) {
    throw ShapeMismatch("disentangle: feature map has " + std::to_string(fm_ori.channels()) +
                        " channels, disentangler expects " + std::to_string(state.config.channels));
  }
  auto input = fm_ori.data();
  const auto param_type = state.net->parameters().front().scalar_type();
  if (input.scalar_type() != param_type) input = input.to(param_type);
  auto [pos, neg] = state.net->forward(input);
  return {FeatureMap(pos, fm_ori.layer_id()), FeatureMap(neg, fm_ori.layer_id())};
}

torch::Tensor reconstruction_loss(const FeatureMap& pos, const FeatureMap& neg, const FeatureMap& ori,
                                  double lambda_re) {
  if (lambda_re < 0.0) throw InvalidInput("reconstruction_loss: lambda_re must be non-negative");
  require_same_shape(pos, ori);
  require_same_shape(neg, ori);
  auto residual = pos.data() + neg.data() - ori.data();
  return lambda_re * residual.pow(2).sum() / static_cast<double>(ori.batch());
}

torch::Tensor positive_ce_loss(const FeatureMap& pos, const torch::Tensor& labels, AuxClassifier& clf,
                               double lambda_ce) {
  if (lambda_ce < 0.0) throw InvalidInput("positive_ce_loss: lambda_ce must be non-negative");
  if (labels.dim() != 1 || labels.size(0) != pos.batch()) {
    throw ShapeMismatch("positive_ce_loss: labels must have one entry per example");
  }
  {
    torch::NoGradGuard guard;
    if (labels.numel() > 0 &&
        (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= clf->num_classes())) {
      throw InvalidInput("positive_ce_loss: label out of range");
    }
  }
  auto logits = clf->forward(reduce_spatialwise(pos));
  return lambda_ce * torch::nn::functional::cross_entropy(logits, labels);
}

DisentanglerLosses disentangler_losses(const FeatureMap& fm_ori, const torch::Tensor& labels,
                                       const DisentanglerState& state, AuxClassifier& clf,
                                       const KernelConfig& kernel) {
  const auto& w = state.config.weights;
  auto [pos, neg] = disentangle(fm_ori, state);
  DisentanglerLosses out;
  out.di = mmd_exp_loss(reduce_channelwise(pos), reduce_channelwise(neg), w.di, kernel);
  out.re = reconstruction_loss(pos, neg, fm_ori, w.re);
  out.ce = positive_ce_loss(pos, labels, clf, w.ce);
  out.total = out.di + out.re + out.ce;
  return out;
}

DisentanglerLosses disentangler_total_loss(const Batch& batch, const ModelAdapter& source,
                                           const DisentanglerState& state, AuxClassifier& clf,
                                           const KernelConfig& kernel) {
  FeatureMap fm_ori;
  {
    torch::NoGradGuard guard;
    fm_ori = source.forward(batch.inputs).features.detached();
  }
  return disentangler_losses(fm_ori, batch.labels, state, clf, kernel);
}

nlohmann::json DisentanglerCurve::to_json() const {
  auto rec = [](const DisentanglerEpochRecord& r) {
    return nlohmann::json{{"epoch", r.epoch}, {"di", r.di},       {"re", r.re},
                          {"ce", r.ce},       {"total", r.total}, {"mmd2", r.mmd2}};
  };
  nlohmann::json j;
  j["initial"] = rec(initial);
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) j["epochs"].push_back(rec(e));
  return j;
}

DisentanglerEpochRecord measure_disentangler(const TensorDataset& data, const ModelAdapter& source,
                                             const DisentanglerState& state, AuxClassifier& clf,
                                             const KernelConfig& kernel, int64_t batch_size) {
  if (data.empty()) throw InvalidInput("measure_disentangler: empty dataset");
  torch::NoGradGuard guard;
  source.eval();
  const bool net_training = state.net->is_training();
  state.net->eval();
  std::mt19937_64 rng(0);
  DisentanglerEpochRecord rec;
  double batches = 0.0;
  for (const auto& idx : sequential_batches(data.size(), batch_size)) {
    auto batch = make_batch(data, idx, /*train=*/false, rng);
    auto fm_ori = source.forward(batch.inputs).features;
    auto losses = disentangler_losses(fm_ori, batch.labels, state, clf, kernel);
    auto [pos, neg] = disentangle(fm_ori, state);
    rec.di += item(losses.di);
    rec.re += item(losses.re);
    rec.ce += item(losses.ce);
    rec.total += item(losses.total);
    rec.mmd2 += item(mmd2(reduce_channelwise(pos).data(), reduce_channelwise(neg).data(), kernel));
    batches += 1.0;
  }
  state.net->train(net_training);
  rec.di /= batches;
  rec.re /= batches;
  rec.ce /= batches;
  rec.total /= batches;
  rec.mmd2 /= batches;
  return rec;
}

DisentanglerCurve train_disentangler(const TensorDataset& data, const ModelAdapter& source,
                                     DisentanglerState& state, AuxClassifier& clf,
                                     const DisentanglerSchedule& schedule, const KernelConfig& kernel) {
  if (data.empty()) throw InvalidInput("train_disentangler: empty dataset");
  if (schedule.epochs < 1 || schedule.batch_size < 1 || !(schedule.learning_rate > 0.0)) {
    throw InvalidInput("train_disentangler: schedule values must be positive");
  }
  source.eval();

  DisentanglerCurve curve;
  curve.initial = measure_disentangler(data, source, state, clf, kernel, schedule.batch_size);

  std::vector<torch::Tensor> params = state.net->parameters();
  for (const auto& p : clf->parameters()) params.push_back(p);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(schedule.learning_rate));
  std::mt19937_64 rng(schedule.seed);
  state.net->train();
  clf->train();

  for (int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    DisentanglerEpochRecord rec;
    rec.epoch = epoch;
    double batches = 0.0;
    for (const auto& idx : shuffled_batches(data.size(), schedule.batch_size, rng)) {
      auto batch = make_batch(data, idx, /*train=*/true, rng);
      auto losses = disentangler_total_loss(batch, source, state, clf, kernel);
      const double total = item(losses.total);
      if (!std::isfinite(total)) {
        throw DivergenceError("train_disentangler: non-finite loss at epoch " + std::to_string(epoch) +
                              " (di=" + std::to_string(item(losses.di)) +
                              ", re=" + std::to_string(item(losses.re)) +
                              ", ce=" + std::to_string(item(losses.ce)) + ")");
      }
      optimizer.zero_grad();
      losses.total.backward();
      optimizer.step();
      rec.di += item(losses.di);
      rec.re += item(losses.re);
      rec.ce += item(losses.ce);
      rec.total += total;
      batches += 1.0;
    }
    rec.di /= batches;
    rec.re /= batches;
    rec.ce /= batches;
    rec.total /= batches;
    rec.mmd2 = measure_disentangler(data, source, state, clf, kernel, schedule.batch_size).mmd2;
    log::debug(log::format("disentangler epoch %lld: di=%.5f re=%.5f ce=%.5f mmd2=%.5f", static_cast<long long>(epoch),
                            rec.di, rec.re, rec.ce, rec.mmd2));
    curve.epochs.push_back(rec);
  }
  state.net->eval();
  clf->eval();
  return curve;
}

void save_disentangler(const DisentanglerState& state, const std::filesystem::path& path,
                       const DisentanglerCurve& curve, int64_t epochs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  state.net->save(archive);
  archive.save_to(path.string());

  nlohmann::json manifest = state.config.to_json();
  manifest["epochs"] = epochs;
  if (!curve.epochs.empty()) {
    const auto& last = curve.epochs.back();
    manifest["final_losses"] = {{"di", last.di}, {"re", last.re}, {"ce", last.ce},
                                {"total", last.total}, {"mmd2", last.mmd2}};
  }
  manifest["mmd_ablated"] = state.mmd_ablated();
  manifest["content_hash"] = state.parameter_hash();
  std::ofstream out(path.string() + ".json");
  out << manifest.dump(2) << "\n";
}

DisentanglerState load_disentangler(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw MissingArtifact("disentangler manifest not found: " + path.string() + ".json");
  DisentanglerState state(DisentanglerConfig::from_json(nlohmann::json::parse(in)));
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw MissingArtifact("cannot read disentangler " + path.string() + ": " + e.what_without_backtrace());
  }
  state.net->load(archive);
  state.net->eval();
  return state;
}

}  // namespace tred
