#include <random>

#include <ATen/CPUGeneratorImpl.h>
#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "tred/backbone.hpp"
#include "tred/disentangler.hpp"
#include "tred/finetune.hpp"
#include "tred/log.hpp"
#include "tred/mmd.hpp"
#include "tred/regularizers.hpp"

using namespace tred;

namespace {

torch::Tensor randn(std::vector<int64_t> shape, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen);
}

void BM_Mmd2(benchmark::State& state) {
  const int64_t n = state.range(0);
  auto x = randn({n, 64}, 1);
  auto y = randn({n, 64}, 2) + 0.5;
  KernelConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(mmd2(x, y, cfg));
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_Mmd2)->Arg(16)->Arg(64)->Arg(256);

void BM_BssPenalty(benchmark::State& state) {
  const int64_t n = state.range(0);
  FeatureMatrix m(randn({n, 2048}, 3));
  for (auto _ : state) benchmark::DoNotOptimize(bss_penalty(m, 1, 0.01));
}
BENCHMARK(BM_BssPenalty)->Arg(16)->Arg(64);

void BM_Disentangle(benchmark::State& state) {
  DisentanglerConfig cfg;
  cfg.channels = 128;
  cfg.layer_id = "stage4";
  DisentanglerState dis(cfg);
  FeatureMap fm(randn({state.range(0), 128, 4, 4}, 4).relu());
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(disentangle(fm, dis));
}
BENCHMARK(BM_Disentangle)->Arg(64);

// One optimizer step of the desk backbone (batch 64, 32x32 inputs).
void BM_SrmStep(benchmark::State& state) {
  const auto kind = static_cast<RegKind>(state.range(0));
  BackboneSpec spec;
  auto source = build_backbone(spec);
  source.freeze();
  auto target = source.with_fresh_head(20, 1);
  Batch batch{randn({64, 3, 32, 32}, 5), torch::randint(20, {64}, torch::kLong)};
  RegularizerConfig reg;
  reg.kind = kind;
  reg.alpha = 0.01;
  reg.beta = kind == RegKind::kNone ? 0.0 : 1e-4;
  if (kind == RegKind::kDELTA) reg.channel_weights = ChannelWeights::uniform(source.transfer_channels());
  DisentanglerConfig dcfg;
  dcfg.channels = source.transfer_channels();
  dcfg.layer_id = source.transfer_layer_id();
  DisentanglerState dis(dcfg);
  dis.freeze();
  torch::optim::SGD opt(target.parameters(), torch::optim::SGDOptions(0.01).momentum(0.9));
  target.train();
  for (auto _ : state) {
    benchmark::DoNotOptimize(srm_step(batch, target, &source, reg, kind == RegKind::kTRED ? &dis : nullptr, opt));
  }
  state.SetLabel(to_string(kind));
}
BENCHMARK(BM_SrmStep)
    ->Arg(static_cast<int>(RegKind::kNone))
    ->Arg(static_cast<int>(RegKind::kL2SP))
    ->Arg(static_cast<int>(RegKind::kDELTA))
    ->Arg(static_cast<int>(RegKind::kBSS))
    ->Arg(static_cast<int>(RegKind::kTRED))
    ->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::kWarn);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
