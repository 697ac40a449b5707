#include <doctest.h>
#include <torch/torch.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "tred/backbone.hpp"
#include "tred/error.hpp"
#include "tred/finetune.hpp"
#include "tred/pretrain.hpp"
#include "tred/synthetic.hpp"

using namespace tred;

namespace {

// Output extent of a 3x3 convolution with padding 1.
int64_t conv_out(int64_t in, int64_t stride) { return (in + 2 - 3) / stride + 1; }

BackboneSpec tiny_spec() {
  BackboneSpec spec;
  spec.widths = {4, 8};
  spec.blocks = {1, 1};
  spec.num_classes = 3;
  spec.transfer_layer_id = "stage2";
  spec.seed = 5;
  return spec;
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("default small net: transfer map is (B, 128, 4, 4) for 32x32 inputs") {
    BackboneSpec spec;
    auto model = build_backbone(spec);
    model.eval();
    auto out = model.forward(oracle::randn({2, 3, 32, 32}, 1, torch::kFloat));
    int64_t extent = conv_out(32, 1);
    for (size_t s = 0; s < spec.widths.size(); ++s) extent = conv_out(extent, s == 0 ? 1 : 2);
    CHECK(out.features.batch() == 2);
    CHECK(out.features.channels() == spec.widths.back());
    CHECK(out.features.height() == extent);
    CHECK(out.features.width() == extent);
    CHECK(extent == 4);
    CHECK(out.logits.sizes() == torch::IntArrayRef{2, 10});
    CHECK(model.transfer_channels() == 128);
  }

  TEST_CASE("parameter partition is total and disjoint") {
    for (auto spec : {BackboneSpec{}, tiny_spec()}) {
      auto model = build_backbone(spec);
      auto all = model.parameters();
      auto bb = model.backbone_parameters();
      auto head = model.head_parameters();
      CHECK(bb.size() + head.size() == all.size());
      std::set<const void*> seen;
      for (const auto& p : bb) seen.insert(p.unsafeGetTensorImpl());
      for (const auto& p : head) CHECK(seen.insert(p.unsafeGetTensorImpl()).second);
      for (const auto& p : all) CHECK(seen.count(p.unsafeGetTensorImpl()) == 1);
      CHECK(!head.empty());
    }
  }

  TEST_CASE("builds are deterministic per seed") {
    auto a = build_backbone(tiny_spec());
    auto b = build_backbone(tiny_spec());
    CHECK(a.parameter_hash() == b.parameter_hash());
    auto spec = tiny_spec();
    spec.seed = 6;
    CHECK(build_backbone(spec).parameter_hash() != a.parameter_hash());
  }

  TEST_CASE("eval forward is deterministic") {
    auto model = build_backbone(tiny_spec());
    model.eval();
    auto x = oracle::randn({3, 3, 16, 16}, 2, torch::kFloat);
    auto o1 = model.forward(x), o2 = model.forward(x);
    CHECK(torch::equal(o1.logits, o2.logits));
    CHECK(torch::equal(o1.features.data(), o2.features.data()));
  }

  TEST_CASE("transfer map requires grad iff backbone training is enabled") {
    auto model = build_backbone(tiny_spec());
    auto x = oracle::randn({2, 3, 16, 16}, 3, torch::kFloat);
    model.set_backbone_trainable(true);
    CHECK(model.forward(x).features.data().requires_grad());
    model.set_backbone_trainable(false);
    CHECK_FALSE(model.forward(x).features.data().requires_grad());
    model.freeze();
    CHECK_FALSE(model.forward(x).features.data().requires_grad());
    CHECK_FALSE(model.forward(x).logits.requires_grad());
  }

  TEST_CASE("spec validation") {
    auto spec = tiny_spec();
    spec.architecture = "vgg";
    CHECK_THROWS_AS(build_backbone(spec), InvalidInput);
    spec = tiny_spec();
    spec.transfer_layer_id = "stage9";
    CHECK_THROWS_AS(spec.validate(), InvalidInput);
    spec.transfer_layer_id = "fc";
    CHECK_THROWS_AS(spec.validate(), InvalidInput);
    spec = tiny_spec();
    CHECK(BackboneSpec::from_json(spec.to_json()).hash() == spec.hash());
  }

  TEST_CASE("earlier transfer layers") {
    auto spec = tiny_spec();
    spec.transfer_layer_id = "stem";
    auto out = build_backbone(spec).forward(oracle::randn({1, 3, 16, 16}, 4, torch::kFloat));
    CHECK(out.features.channels() == 4);
    CHECK(out.features.height() == 16);
    spec.transfer_layer_id = "stage1";
    out = build_backbone(spec).forward(oracle::randn({1, 3, 16, 16}, 4, torch::kFloat));
    CHECK(out.features.channels() == 4);
  }

  TEST_CASE("fresh head keeps the backbone and replaces the head") {
    auto src = build_backbone(tiny_spec());
    auto tgt = src.with_fresh_head(7, 11);
    CHECK(tgt.num_classes() == 7);
    auto a = src.backbone_parameters(), b = tgt.backbone_parameters();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));
    for (const auto& p : tgt.head_parameters()) {
      if (p.dim() == 1) CHECK(p.abs().sum().item<double>() == 0.0);
    }
    auto tgt2 = src.with_fresh_head(7, 11);
    CHECK(tgt2.parameter_hash() == tgt.parameter_hash());
    // Training the copy leaves the source untouched.
    const auto before = src.parameter_hash();
    torch::NoGradGuard guard;
    for (auto& p : tgt.parameters()) p.add_(1.0);
    CHECK(src.parameter_hash() == before);
  }

  TEST_CASE("checkpoint round trip reproduces evaluation exactly") {
    SyntheticImageSpec ispec;
    ispec.class_ids = {0, 6, 12};
    ispec.images_per_class = 12;
    ispec.image_size = 20;
    ispec.seed = 3;
    TransformConfig tc;
    tc.resize_shorter = 20;
    tc.crop = 16;
    auto data = prepare_dataset(generate_shape_texture_images(ispec), tc);
    TrainingSchedule schedule;
    schedule.epochs = 2;
    schedule.lr_decay_epoch = 1;
    schedule.batch_size = 16;
    auto result = pretrain_source(tiny_spec(), data, &data, schedule, {});
    CHECK(result.train_top1 >= 0.0);
    CHECK(result.train_top1 <= 100.0);
    CHECK(result.manifest.at("spec_hash") == tiny_spec().hash());
    CHECK(result.manifest.at("dataset_hash") == data.content_hash());

    const auto path = std::filesystem::temp_directory_path() / "tred_backbone_ckpt.pt";
    save_source(result, path);
    auto loaded = ModelAdapter::load(path);
    CHECK(loaded.parameter_hash() == result.model.parameter_hash());
    CHECK(evaluate(loaded, data) == evaluate(result.model, data));
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".json");

    CHECK_THROWS_AS(ModelAdapter::load(path), MissingArtifact);
    TensorDataset empty;
    CHECK_THROWS_AS(pretrain_source(tiny_spec(), empty, nullptr, schedule, {}), InvalidInput);
  }
}
