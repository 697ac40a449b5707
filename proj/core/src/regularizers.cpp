#include "tred/regularizers.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "tred/error.hpp"
#include "tred/log.hpp"
#include "tred/hashing.hpp"

namespace tred {

namespace {

torch::Tensor zero_like_scalar(const std::vector<torch::Tensor>& hint) {
  auto opts = hint.empty() ? torch::TensorOptions().dtype(torch::kFloat) : hint.front().options();
  return torch::zeros({}, opts.requires_grad(false));
}

torch::Tensor squared_norm(const std::vector<torch::Tensor>& params) {
  auto total = zero_like_scalar(params);
  for (const auto& p : params) total = total + p.pow(2).sum();
  return total;
}

}  // namespace

std::string to_string(RegKind kind) {
  switch (kind) {
    case RegKind::kNone: return "None";
    case RegKind::kL2: return "L2";
    case RegKind::kL2SP: return "L2-SP";
    case RegKind::kAT: return "AT";
    case RegKind::kDELTA: return "DELTA";
    case RegKind::kBSS: return "BSS";
    case RegKind::kTRED: return "TRED";
  }
  return "?";
}

RegKind parse_reg_kind(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (c != '-' && c != '_') s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (s == "none" || s == "noreg") return RegKind::kNone;
  if (s == "l2") return RegKind::kL2;
  if (s == "l2sp") return RegKind::kL2SP;
  if (s == "at") return RegKind::kAT;
  if (s == "delta") return RegKind::kDELTA;
  if (s == "bss") return RegKind::kBSS;
  if (s == "tred") return RegKind::kTRED;
  throw InvalidInput("unknown regularizer '" + name + "'");
}

const std::vector<RegKind>& method_order() {
  static const std::vector<RegKind> order{RegKind::kNone, RegKind::kL2,    RegKind::kBSS, RegKind::kL2SP,
                                          RegKind::kAT,   RegKind::kDELTA, RegKind::kTRED};
  return order;
}

void ChannelWeights::validate() const {
  if (w.empty()) throw InvalidInput("ChannelWeights: empty");
  double sum = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidInput("ChannelWeights: negative or non-finite weight");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InvalidInput("ChannelWeights: weights must sum to 1");
}

ChannelWeights ChannelWeights::uniform(int64_t channels) {
  if (channels < 1) throw InvalidInput("ChannelWeights::uniform: channels must be positive");
  return {std::vector<double>(static_cast<size_t>(channels), 1.0 / static_cast<double>(channels)), {}, {}};
}

nlohmann::json ChannelWeights::to_json() const {
  return {{"layer_id", layer_id}, {"weights", w}, {"probe_hash", probe_hash}};
}

ChannelWeights ChannelWeights::from_json(const nlohmann::json& j) {
  ChannelWeights cw;
  cw.layer_id = j.value("layer_id", std::string{});
  cw.w = j.at("weights").get<std::vector<double>>();
  cw.probe_hash = j.value("probe_hash", std::string{});
  cw.validate();
  return cw;
}

void ChannelWeights::save(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  out << to_json().dump(2) << "\n";
}

ChannelWeights ChannelWeights::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw MissingArtifact("channel weights not found: " + file.string());
  return from_json(nlohmann::json::parse(in));
}

void RegularizerConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0) throw InvalidInput("RegularizerConfig: alpha and beta must be non-negative");
  if (k < 1) throw InvalidInput("RegularizerConfig: k must be at least 1");
  if (channel_weights) channel_weights->validate();
}

nlohmann::json RegularizerConfig::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)}, {"alpha", alpha}, {"beta", beta}, {"k", k}};
  if (channel_weights) j["channel_weights"] = channel_weights->to_json();
  return j;
}

RegularizerConfig RegularizerConfig::from_json(const nlohmann::json& j) {
  RegularizerConfig c;
  c.kind = parse_reg_kind(j.value("kind", std::string("None")));
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.k = j.value("k", c.k);
  if (j.contains("channel_weights")) c.channel_weights = ChannelWeights::from_json(j.at("channel_weights"));
  c.validate();
  return c;
}

torch::Tensor l2_penalty(const std::vector<torch::Tensor>& params, double beta) {
  if (beta < 0.0) throw InvalidInput("l2_penalty: beta must be non-negative");
  return 0.5 * beta * squared_norm(params);
}

torch::Tensor l2sp_penalty(const std::vector<torch::Tensor>& omega_s,
                           const std::vector<torch::Tensor>& omega_s0,
                           const std::vector<torch::Tensor>& omega_head, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw InvalidInput("l2sp_penalty: strengths must be non-negative");
  if (omega_s.size() != omega_s0.size()) {
    throw ShapeMismatch("l2sp_penalty: parameter lists differ in length");
  }
  auto drift = zero_like_scalar(omega_s);
  for (size_t i = 0; i < omega_s.size(); ++i) {
    if (omega_s[i].sizes() != omega_s0[i].sizes()) {
      throw ShapeMismatch("l2sp_penalty: parameter " + std::to_string(i) + " differs in shape");
    }
    drift = drift + (omega_s[i] - omega_s0[i].detach()).pow(2).sum();
  }
  return 0.5 * alpha * drift + 0.5 * beta * squared_norm(omega_head);
}

torch::Tensor at_penalty(const FeatureMap& fm_target, const FeatureMap& fm_source, double alpha) {
  if (alpha < 0.0) throw InvalidInput("at_penalty: alpha must be non-negative");
  require_same_shape(fm_target, fm_source);
  auto diff = attention_map(fm_target).data() - attention_map(fm_source).data();
  return 0.5 * alpha * diff.pow(2).sum(1).mean();
}

torch::Tensor delta_penalty(const FeatureMap& fm_target, const FeatureMap& fm_source,
                            const ChannelWeights& weights, double alpha) {
  if (alpha < 0.0) throw InvalidInput("delta_penalty: alpha must be non-negative");
  require_same_shape(fm_target, fm_source);
  if (static_cast<int64_t>(weights.w.size()) != fm_target.channels()) {
    throw ShapeMismatch("delta_penalty: channel weight count differs from channel count");
  }
  auto per_channel = (fm_target.data() - fm_source.data()).pow(2).sum({2, 3}).mean(0);
  auto w = torch::tensor(weights.w, per_channel.options().requires_grad(false));
  return 0.5 * alpha * (w * per_channel).sum();
}

torch::Tensor singular_values(const torch::Tensor& a) {
  try {
    return torch::linalg_svdvals(a);
  } catch (const c10::Error&) {
    log::warn("SVD failed, retrying with jitter");
  }
  try {
    double scale = 1.0;
    {
      torch::NoGradGuard guard;
      scale = std::max(1.0, a.abs().max().item<double>());
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
    auto noise = torch::randn(a.sizes(), gen, a.options().requires_grad(false)) * (1e-8 * scale);
    return torch::linalg_svdvals(a + noise);
  } catch (const c10::Error& e) {
    throw NumericalError(std::string("SVD did not converge: ") + e.what_without_backtrace());
  }
}

torch::Tensor bss_penalty(const FeatureMatrix& features, int64_t k, double alpha) {
  if (alpha < 0.0) throw InvalidInput("bss_penalty: alpha must be non-negative");
  const int64_t rank_dim = std::min(features.rows(), features.cols());
  if (k < 1 || k > rank_dim) {
    throw InvalidInput("bss_penalty: k=" + std::to_string(k) + " outside [1, " + std::to_string(rank_dim) + "]");
  }
  auto sigma = singular_values(features.data());
  // svdvals is descending; the k smallest are the tail.
  return alpha * sigma.narrow(0, rank_dim - k, k).pow(2).sum();
}

torch::Tensor tred_penalty(const FeatureMap& fm_target, const FeatureMap& fm_pos, double alpha) {
  if (alpha < 0.0) throw InvalidInput("tred_penalty: alpha must be non-negative");
  require_same_shape(fm_target, fm_pos);
  auto diff = fm_target.data() - fm_pos.data().detach();
  return 0.5 * alpha * diff.pow(2).sum() / static_cast<double>(fm_target.batch());
}

ChannelWeights delta_weights_from_features(const torch::Tensor& pooled, const torch::Tensor& labels,
                                           int64_t num_classes, const ProbeOptions& options) {
  if (pooled.dim() != 2 || pooled.size(0) < 1) throw InvalidInput("delta_channel_weights: empty probe set");
  if (labels.size(0) != pooled.size(0)) throw ShapeMismatch("delta_channel_weights: label count mismatch");
  const int64_t channels = pooled.size(1);
  auto x = pooled.detach().to(torch::kDouble);
  auto y = labels.to(torch::kLong);

  // Zero-initialised softmax regression; zero init keeps the probe equivariant
  // under channel permutations.
  auto weight = torch::zeros({channels, num_classes}, torch::kDouble).requires_grad_(true);
  auto bias = torch::zeros({num_classes}, torch::kDouble).requires_grad_(true);
  torch::optim::SGD opt({weight, bias}, torch::optim::SGDOptions(options.learning_rate).momentum(0.9));
  for (int64_t it = 0; it < options.iterations; ++it) {
    opt.zero_grad();
    auto loss = torch::nn::functional::cross_entropy(torch::matmul(x, weight) + bias, y);
    loss.backward();
    opt.step();
  }

  torch::NoGradGuard guard;
  const auto loss_with = [&](const torch::Tensor& feats) {
    return torch::nn::functional::cross_entropy(torch::matmul(feats, weight) + bias, y).item<double>();
  };
  const double base = loss_with(x);
  std::vector<double> drop(static_cast<size_t>(channels));
  for (int64_t j = 0; j < channels; ++j) {
    auto masked = x.clone();
    masked.select(1, j).zero_();
    drop[static_cast<size_t>(j)] = loss_with(masked) - base;
  }
  auto w = torch::softmax(torch::tensor(drop, torch::kDouble), 0);
  ChannelWeights out;
  out.w.assign(w.data_ptr<double>(), w.data_ptr<double>() + channels);
  return out;
}

ChannelWeights delta_channel_weights(const ModelAdapter& source, const TensorDataset& probe_data,
                                     uint64_t seed, const ProbeOptions& options) {
  if (probe_data.empty()) throw InvalidInput("delta_channel_weights: empty probe set");
  std::vector<torch::Tensor> pooled;
  {
    torch::NoGradGuard guard;
    source.eval();
    std::mt19937_64 rng(seed);
    for (const auto& idx : sequential_batches(probe_data.size(), options.batch_size)) {
      auto batch = make_batch(probe_data, idx, /*train=*/false, rng);
      pooled.push_back(reduce_spatialwise(source.forward(batch.inputs).features).data());
    }
  }
  auto features = torch::cat(pooled, 0);
  auto out = delta_weights_from_features(features, probe_data.labels, probe_data.num_classes, options);
  out.layer_id = source.transfer_layer_id();
  out.probe_hash = ContentHash{}
                       .update(probe_data.content_hash())
                       .update(source.parameter_hash())
                       .update(seed)
                       .hex();
  return out;
}

}  // namespace tred
