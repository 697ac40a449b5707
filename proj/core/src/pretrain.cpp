#include "tred/pretrain.hpp"

#include <cmath>

#include "tred/error.hpp"
#include "tred/log.hpp"

namespace tred {

PretrainResult pretrain_source(const BackboneSpec& spec, const TensorDataset& train, const TensorDataset* test,
                               const TrainingSchedule& schedule, const PretrainOptions& options) {
  if (train.empty()) throw InvalidInput("pretrain_source: empty dataset");
  if (train.num_classes != spec.num_classes) {
    throw InvalidInput("pretrain_source: spec has " + std::to_string(spec.num_classes) + " classes, dataset " +
                       std::to_string(train.num_classes));
  }
  schedule.validate();

  ModelAdapter model = build_backbone(spec);
  for (auto& p : model.parameters()) p.set_requires_grad(true);
  torch::optim::SGD optimizer(model.parameters(), torch::optim::SGDOptions(schedule.base_lr)
                                                      .momentum(schedule.momentum)
                                                      .weight_decay(options.weight_decay));
  std::mt19937_64 rng(schedule.seed * 0x9e3779b97f4a7c15ULL + 7);
  for (int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = learning_rate_at(schedule, epoch);
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    model.train();
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (const auto& idx : shuffled_batches(train.size(), schedule.batch_size, rng)) {
      auto batch = make_batch(train, idx, true, rng);
      auto loss = torch::nn::functional::cross_entropy(model.forward(batch.inputs).logits, batch.labels);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw DivergenceError("pretrain_source: non-finite loss at epoch " + std::to_string(epoch));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      loss_sum += value;
      ++batches;
    }
    log::info(log::format("pretrain epoch %lld/%lld: loss %.4f", static_cast<long long>(epoch + 1),
                           static_cast<long long>(schedule.epochs), loss_sum / static_cast<double>(batches)));
  }
  model.eval();

  PretrainResult result;
  result.train_top1 = evaluate(model, train);
  result.test_top1 = test != nullptr ? evaluate(model, *test) : result.train_top1;
  result.manifest = {{"spec_hash", spec.hash()},
                     {"dataset", options.dataset_name},
                     {"dataset_hash", train.content_hash()},
                     {"schedule", schedule.to_json()},
                     {"weight_decay", options.weight_decay},
                     {"train_top1", result.train_top1},
                     {"test_top1", result.test_top1}};
  if (test != nullptr) result.manifest["test_dataset_hash"] = test->content_hash();
  result.model = std::move(model);
  return result;
}

void save_source(const PretrainResult& result, const std::filesystem::path& path) {
  result.model.save(path, result.manifest);
}

}  // namespace tred
