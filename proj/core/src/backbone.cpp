#include "tred/backbone.hpp"

#include <cmath>
#include <fstream>

#include <ATen/CPUGeneratorImpl.h>

#include "tred/error.hpp"
#include "tred/hashing.hpp"

namespace tred {

namespace nn = torch::nn;

namespace {

void init_normal(torch::Tensor& w, double std, at::Generator& gen) {
  torch::NoGradGuard guard;
  w.normal_(0.0, std, gen);
}

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride)
      : conv1_(register_module("conv1", conv3x3(in, out, stride))),
        bn1_(register_module("bn1", nn::BatchNorm2d(out))),
        conv2_(register_module("conv2", conv3x3(out, out, 1))),
        bn2_(register_module("bn2", nn::BatchNorm2d(out))) {
    if (stride != 1 || in != out) {
      shortcut_conv_ = register_module(
          "shortcut_conv",
          nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
      shortcut_bn_ = register_module("shortcut_bn", nn::BatchNorm2d(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1_(conv1_(x)));
    y = bn2_(conv2_(y));
    auto skip = shortcut_conv_ ? shortcut_bn_(shortcut_conv_(x)) : x;
    return torch::relu(y + skip);
  }

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d bn2_;
  nn::Conv2d shortcut_conv_{nullptr};
  nn::BatchNorm2d shortcut_bn_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// Pre-activation-free ResNet for small inputs: 3x3 stem, then one stage per
/// width, the first stage at stride 1 and the rest at stride 2.
class SmallResNet : public BackboneNet {
 public:
  explicit SmallResNet(const BackboneSpec& spec) : spec_(spec) {
    stem_conv_ = register_module("stem_conv", conv3x3(spec.in_channels, spec.widths[0], 1));
    stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(spec.widths[0]));
    int64_t in = spec.widths[0];
    for (size_t s = 0; s < spec.widths.size(); ++s) {
      nn::Sequential stage;
      for (int64_t b = 0; b < spec.blocks[s]; ++b) {
        const int64_t stride = (b == 0 && s > 0) ? 2 : 1;
        stage->push_back(BasicBlock(in, spec.widths[s], stride));
        in = spec.widths[s];
      }
      stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
    }
    fc_ = register_module("fc", nn::Linear(in, spec.num_classes));
    if (spec.transfer_layer_id == "stem") {
      transfer_index_ = 0;
      transfer_channels_ = spec.widths[0];
    } else {
      transfer_index_ = std::stoi(spec.transfer_layer_id.substr(5));
      transfer_channels_ = spec.widths[transfer_index_ - 1];
    }
    initialize(spec.seed);
  }

  ForwardOutput forward(const torch::Tensor& x) override {
    auto h = torch::relu(stem_bn_(stem_conv_(x)));
    torch::Tensor transfer = transfer_index_ == 0 ? h : torch::Tensor();
    for (size_t s = 0; s < stages_.size(); ++s) {
      h = stages_[s]->forward(h);
      if (static_cast<int>(s) + 1 == transfer_index_) transfer = h;
    }
    return {pool_fc(h), FeatureMap(transfer, spec_.transfer_layer_id)};
  }

  torch::Tensor head_forward(const torch::Tensor& features) override {
    if (transfer_index_ != static_cast<int>(stages_.size())) {
      throw InvalidInput("head_forward requires the transfer layer to be the last stage");
    }
    return pool_fc(features);
  }

  std::vector<torch::Tensor> backbone_parameters() override {
    std::vector<torch::Tensor> out;
    for (const auto& item : named_parameters()) {
      if (!item.key().starts_with("fc.")) out.push_back(item.value());
    }
    return out;
  }

  std::vector<torch::Tensor> head_parameters() override { return fc_->parameters(); }

  int64_t transfer_channels() const override { return transfer_channels_; }

 private:
  torch::Tensor pool_fc(const torch::Tensor& h) { return fc_(h.mean({2, 3})); }

  void initialize(uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard guard;
    for (auto& item : named_parameters()) {
      auto& p = item.value();
      const auto& name = item.key();
      if (p.dim() == 4) {
        // Kaiming normal, fan-out mode.
        const double fan_out = static_cast<double>(p.size(0) * p.size(2) * p.size(3));
        init_normal(p, std::sqrt(2.0 / fan_out), gen);
      } else if (p.dim() == 2) {
        init_normal(p, std::sqrt(1.0 / static_cast<double>(p.size(1))), gen);
      } else if (name.ends_with(".weight")) {
        p.fill_(1.0);
      } else {
        p.zero_();
      }
    }
  }

  BackboneSpec spec_;
  nn::Conv2d stem_conv_{nullptr};
  nn::BatchNorm2d stem_bn_{nullptr};
  std::vector<nn::Sequential> stages_;
  nn::Linear fc_{nullptr};
  int transfer_index_ = 0;
  int64_t transfer_channels_ = 0;
};

/// The input tensor is the transfer-layer map; the head pools and classifies.
class IdentityBackbone : public BackboneNet {
 public:
  explicit IdentityBackbone(const BackboneSpec& spec) : spec_(spec) {
    fc_ = register_module("fc", nn::Linear(spec.in_channels, spec.num_classes));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed);
    torch::NoGradGuard guard;
    init_normal(fc_->weight, std::sqrt(1.0 / static_cast<double>(spec.in_channels)), gen);
    fc_->bias.zero_();
  }

  ForwardOutput forward(const torch::Tensor& x) override {
    return {head_forward(x), FeatureMap(x, spec_.transfer_layer_id)};
  }
  torch::Tensor head_forward(const torch::Tensor& features) override {
    return fc_(features.mean({2, 3}));
  }
  std::vector<torch::Tensor> backbone_parameters() override { return {}; }
  std::vector<torch::Tensor> head_parameters() override { return fc_->parameters(); }
  int64_t transfer_channels() const override { return spec_.in_channels; }

 private:
  BackboneSpec spec_;
  nn::Linear fc_{nullptr};
};

}  // namespace

void BackboneSpec::validate() const {
  if (architecture == "identity") {
    if (in_channels < 1 || num_classes < 1) throw InvalidInput("BackboneSpec: bad extents");
    return;
  }
  if (architecture != "resnet_small") {
    throw InvalidInput("BackboneSpec: unknown architecture '" + architecture + "'");
  }
  if (widths.empty() || widths.size() != blocks.size()) {
    throw InvalidInput("BackboneSpec: widths and blocks must be non-empty and equal length");
  }
  for (size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1 || blocks[i] < 1) throw InvalidInput("BackboneSpec: non-positive width/depth");
  }
  if (in_channels < 1 || num_classes < 1) throw InvalidInput("BackboneSpec: bad extents");
  if (transfer_layer_id != "stem") {
    bool ok = transfer_layer_id.starts_with("stage") && transfer_layer_id.size() > 5;
    if (ok) {
      try {
        const int idx = std::stoi(transfer_layer_id.substr(5));
        ok = idx >= 1 && idx <= static_cast<int>(widths.size());
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (!ok) throw InvalidInput("BackboneSpec: transfer layer '" + transfer_layer_id + "' not in graph");
  }
}

nlohmann::json BackboneSpec::to_json() const {
  return {{"architecture", architecture}, {"widths", widths},
          {"blocks", blocks},             {"in_channels", in_channels},
          {"num_classes", num_classes},   {"transfer_layer_id", transfer_layer_id},
          {"seed", seed}};
}

BackboneSpec BackboneSpec::from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.architecture = j.value("architecture", s.architecture);
  s.widths = j.value("widths", s.widths);
  s.blocks = j.value("blocks", s.blocks);
  s.in_channels = j.value("in_channels", s.in_channels);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.transfer_layer_id = j.value("transfer_layer_id", s.transfer_layer_id);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::string BackboneSpec::hash() const { return hash_hex(to_json().dump()); }

ModelAdapter::ModelAdapter(BackboneSpec spec, std::shared_ptr<BackboneNet> net)
    : spec_(std::move(spec)), net_(std::move(net)) {}

std::vector<torch::Tensor> ModelAdapter::parameters() const { return net_->parameters(); }

void ModelAdapter::freeze() const {
  net_->eval();
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

void ModelAdapter::set_backbone_trainable(bool on) const {
  for (auto& p : net_->backbone_parameters()) p.set_requires_grad(on);
}

ModelAdapter ModelAdapter::clone() const {
  auto copy = build_backbone(spec_);
  copy_matching_state(*net_, copy.net(), /*include_head=*/true);
  copy.net().train(net_->is_training());
  return copy;
}

ModelAdapter ModelAdapter::with_fresh_head(int64_t num_classes, uint64_t seed) const {
  BackboneSpec spec = spec_;
  spec.num_classes = num_classes;
  spec.seed = seed;
  auto copy = build_backbone(spec);
  copy_matching_state(*net_, copy.net(), /*include_head=*/false);
  return copy;
}

std::string ModelAdapter::parameter_hash() const {
  ContentHash h;
  for (const auto& item : net_->named_parameters()) {
    h.update(item.key());
    h.update(item.value());
  }
  for (const auto& item : net_->named_buffers()) {
    h.update(item.key());
    h.update(item.value());
  }
  return h.hex();
}

void ModelAdapter::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  net_->save(archive);
  archive.save_to(path.string());

  nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
  manifest["spec"] = spec_.to_json();
  manifest["spec_hash"] = spec_.hash();
  manifest["parameter_hash"] = parameter_hash();
  std::ofstream out(path.string() + ".json");
  out << manifest.dump(2) << "\n";
}

ModelAdapter ModelAdapter::load(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw MissingArtifact("checkpoint manifest not found: " + path.string() + ".json");
  const auto manifest = nlohmann::json::parse(in);
  auto model = build_backbone(BackboneSpec::from_json(manifest.at("spec")));
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw MissingArtifact("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  model.net().load(archive);
  return model;
}

ModelAdapter build_backbone(const BackboneSpec& spec) {
  spec.validate();
  std::shared_ptr<BackboneNet> net;
  if (spec.architecture == "identity") {
    net = std::make_shared<IdentityBackbone>(spec);
  } else {
    net = std::make_shared<SmallResNet>(spec);
  }
  return ModelAdapter(spec, std::move(net));
}

void copy_matching_state(const BackboneNet& from, BackboneNet& to, bool include_head) {
  torch::NoGradGuard guard;
  auto src_params = from.named_parameters();
  auto src_buffers = from.named_buffers();
  for (auto& item : to.named_parameters()) {
    if (!include_head && item.key().starts_with("fc.")) continue;
    if (const auto* src = src_params.find(item.key());
        src != nullptr && src->sizes() == item.value().sizes()) {
      item.value().copy_(*src);
    }
  }
  for (auto& item : to.named_buffers()) {
    if (const auto* src = src_buffers.find(item.key());
        src != nullptr && src->sizes() == item.value().sizes()) {
      item.value().copy_(*src);
    }
  }
}

}  // namespace tred
