#include "tred/pipeline.hpp"

#include "tred/error.hpp"
#include "tred/log.hpp"

namespace tred {

bool uses_alpha(RegKind kind) { return kind != RegKind::kNone && kind != RegKind::kL2; }

TransferRunner::TransferRunner(ModelAdapter source, TransferSetup setup)
    : source_(std::move(source)), setup_(std::move(setup)) {
  if (!source_.valid()) throw MissingArtifact("TransferRunner: no source model");
  if (setup_.train.empty() || setup_.test.empty()) throw InvalidInput("TransferRunner: empty split");
  setup_.schedule.validate();
  source_.freeze();
}

TransferRunner::Stage1& TransferRunner::stage1(uint64_t seed, bool ablate_mmd, const TensorDataset* data) {
  const TensorDataset& d = data != nullptr ? *data : setup_.train;
  auto key = std::make_tuple(d.content_hash(), seed, ablate_mmd);
  auto it = disentanglers_.find(key);
  if (it != disentanglers_.end()) return it->second;

  const SeedPlan seeds{seed};
  DisentanglerConfig cfg;
  cfg.channels = source_.transfer_channels();
  cfg.hidden_ratio = setup_.hidden_ratio;
  cfg.weights = setup_.weights;
  if (ablate_mmd) cfg.weights.di = 0.0;
  cfg.layer_id = source_.transfer_layer_id();
  cfg.seed = seeds.stage1();
  Stage1 s;
  s.state = std::make_unique<DisentanglerState>(cfg);
  AuxClassifier clf(cfg.channels, d.num_classes, seeds.stage1() + 1);
  DisentanglerSchedule schedule = setup_.stage1;
  schedule.seed = seeds.stage1();
  s.curve = train_disentangler(d, source_, *s.state, clf, schedule, setup_.kernel);
  s.state->freeze();
  return disentanglers_.emplace(key, std::move(s)).first->second;
}

const DisentanglerState& TransferRunner::disentangler(uint64_t seed, bool ablate_mmd, const TensorDataset* data) {
  return *stage1(seed, ablate_mmd, data).state;
}

const DisentanglerCurve& TransferRunner::disentangler_curve(uint64_t seed, bool ablate_mmd,
                                                            const TensorDataset* data) {
  return stage1(seed, ablate_mmd, data).curve;
}

const ChannelWeights& TransferRunner::delta_weights(uint64_t seed, const TensorDataset* data) {
  const TensorDataset& d = data != nullptr ? *data : setup_.train;
  auto key = std::make_pair(d.content_hash(), seed);
  auto it = delta_.find(key);
  if (it != delta_.end()) return it->second;
  return delta_.emplace(key, delta_channel_weights(source_, d, SeedPlan{seed}.stage1(), setup_.probe))
      .first->second;
}

RegularizerConfig TransferRunner::make_config(RegKind kind, double alpha, uint64_t seed, const TensorDataset* data) {
  RegularizerConfig reg;
  reg.kind = kind;
  reg.alpha = uses_alpha(kind) ? alpha : 0.0;
  reg.beta = kind == RegKind::kNone ? 0.0 : setup_.beta;
  if (kind == RegKind::kDELTA) reg.channel_weights = delta_weights(seed, data);
  return reg;
}

FinetuneResult TransferRunner::run(RegKind kind, double alpha, uint64_t seed, bool ablate_mmd,
                                   const TensorDataset* train, const TensorDataset* eval) {
  const TensorDataset& tr = train != nullptr ? *train : setup_.train;
  const TensorDataset& ev = eval != nullptr ? *eval : setup_.test;
  auto reg = make_config(kind, alpha, seed, &tr);
  const DisentanglerState* dis = kind == RegKind::kTRED ? &disentangler(seed, ablate_mmd, &tr) : nullptr;
  TrainingSchedule schedule = setup_.schedule;
  schedule.seed = SeedPlan{seed}.stage2();
  FinetuneOptions options;
  options.dataset_name = setup_.name;
  auto result = finetune(tr, &ev, source_, reg, dis, schedule, options);
  result.record.seed = seed;
  if (kind == RegKind::kTRED && ablate_mmd) result.record.method = "TRED-";
  log::info(log::format("%s %s alpha=%g seed=%llu: top-1 %.2f", setup_.name.c_str(), result.record.method.c_str(),
                                 reg.alpha, static_cast<unsigned long long>(seed), result.record.final_top1));
  return result;
}

double TransferRunner::select_alpha(RegKind kind, const std::vector<double>& grid, uint64_t seed,
                                    double holdout_fraction) {
  if (!uses_alpha(kind)) return 0.0;
  if (grid.empty()) throw InvalidInput("select_alpha: empty grid");
  auto [fit_idx, val_idx] = stratified_split(setup_.train, holdout_fraction, SeedPlan{seed}.data());
  if (val_idx.empty()) throw InvalidInput("select_alpha: hold-out split is empty");
  const TensorDataset fit = subset(setup_.train, fit_idx);
  const TensorDataset val = subset(setup_.train, val_idx);
  double best_alpha = grid.front();
  double best_acc = -1.0;
  for (double alpha : grid) {
    const double acc = run(kind, alpha, seed, false, &fit, &val).record.final_top1;
    if (acc > best_acc) {
      best_acc = acc;
      best_alpha = alpha;
    }
  }
  log::info(log::format("%s: selected alpha=%g (hold-out top-1 %.2f)", to_string(kind).c_str(), best_alpha, best_acc));
  return best_alpha;
}

namespace {

LabeledImages universe_images(const std::vector<int>& ids, int64_t per_class, const DeskTaskConfig& cfg,
                              uint64_t seed) {
  SyntheticImageSpec spec;
  spec.class_ids = ids;
  spec.images_per_class = per_class;
  spec.image_size = cfg.image_size;
  spec.clutter = cfg.clutter;
  spec.pixel_noise = cfg.pixel_noise;
  spec.seed = seed;
  return generate_shape_texture_images(spec);
}

}  // namespace

DeskData make_desk_data(const DeskTaskConfig& cfg) {
  cfg.transform.validate();
  const std::vector<int> source_ids(kSourceClassIds.begin(), kSourceClassIds.end());
  const std::vector<int> target_ids = target_class_ids();
  DeskData d;
  d.source_train = prepare_dataset(universe_images(source_ids, cfg.source_train_per_class, cfg, cfg.seed * 4 + 1),
                                   cfg.transform);
  d.source_test = prepare_dataset(universe_images(source_ids, cfg.source_test_per_class, cfg, cfg.seed * 4 + 2),
                                  cfg.transform);
  d.target_train_images = universe_images(target_ids, cfg.target_train_per_class, cfg, cfg.seed * 4 + 3);
  d.target_train = prepare_dataset(d.target_train_images, cfg.transform);
  d.target_test = prepare_dataset(universe_images(target_ids, cfg.target_test_per_class, cfg, cfg.seed * 4 + 4),
                                  cfg.transform);
  return d;
}

}  // namespace tred
