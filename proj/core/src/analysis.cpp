#include "tred/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "tred/error.hpp"
#include "tred/log.hpp"
#include "tred/regularizers.hpp"

namespace tred {

namespace F = torch::nn::functional;

std::string to_string(SpectrumVariant v) { return v == SpectrumVariant::kOriginal ? "original" : "positive"; }

nlohmann::json SpectrumReport::to_json() const {
  return {{"layer_id", layer_id}, {"variant", to_string(variant)}, {"sigmas", sigmas}, {"batch", batch}};
}

SpectrumReport SpectrumReport::from_json(const nlohmann::json& j) {
  SpectrumReport r;
  r.layer_id = j.value("layer_id", std::string{});
  const auto v = j.value("variant", std::string("original"));
  if (v != "original" && v != "positive") throw InvalidInput("SpectrumReport: unknown variant '" + v + "'");
  r.variant = v == "original" ? SpectrumVariant::kOriginal : SpectrumVariant::kPositive;
  r.sigmas = j.at("sigmas").get<std::vector<double>>();
  r.batch = j.value("batch", int64_t{0});
  return r;
}

SpectrumReport singular_spectrum(const FeatureMatrix& features, std::string layer_id, SpectrumVariant variant) {
  torch::NoGradGuard guard;
  auto sigma = singular_values(features.data().to(torch::kDouble)).contiguous();
  SpectrumReport r;
  r.layer_id = std::move(layer_id);
  r.variant = variant;
  r.batch = features.rows();
  r.sigmas.assign(sigma.data_ptr<double>(), sigma.data_ptr<double>() + sigma.numel());
  // Guard against round-off reordering of near-equal values.
  std::sort(r.sigmas.begin(), r.sigmas.end(), std::greater<>());
  for (auto& s : r.sigmas) s = std::max(s, 0.0);
  return r;
}

double bottom_quartile_energy(const SpectrumReport& report) {
  const size_t n = report.sigmas.size();
  const size_t q = (n + 3) / 4;
  double e = 0.0;
  for (size_t i = n - q; i < n; ++i) e += report.sigmas[i] * report.sigmas[i];
  return e;
}

void Embedding::save_csv(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  out << "x,y,label\n";
  auto p = points.contiguous();
  for (int64_t i = 0; i < p.size(0); ++i) {
    out << p[i][0].item<double>() << "," << p[i][1].item<double>() << "," << labels[static_cast<size_t>(i)] << "\n";
  }
}

Embedding embed_2d(const torch::Tensor& descriptors, const std::vector<int64_t>& labels, EmbedBackend backend) {
  if (descriptors.dim() != 2) throw InvalidInput("embed_2d: descriptors must be (N, C)");
  const int64_t n = descriptors.size(0);
  if (n < 3) throw InvalidInput("embed_2d: need at least 3 points");
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeMismatch("embed_2d: label count mismatch");
  if (backend == EmbedBackend::kTsneIfAvailable) {
    log::info("embed_2d: no t-SNE backend available, using PCA");
  }
  torch::NoGradGuard guard;
  auto x = descriptors.detach().to(torch::kDouble);
  x = x - x.mean(0, true);
  auto svd = torch::linalg_svd(x, /*full_matrices=*/false);
  auto v = std::get<2>(svd);  // (r, C), rows are principal axes
  const int64_t r = std::min<int64_t>(2, v.size(0));
  auto axes = v.narrow(0, 0, r).clone();
  for (int64_t i = 0; i < r; ++i) {
    // Deterministic sign: the largest-magnitude loading is positive.
    auto row = axes[i];
    if (row[row.abs().argmax()].item<double>() < 0.0) axes[i].neg_();
  }
  Embedding e;
  e.points = torch::zeros({n, 2}, torch::kDouble);
  e.points.narrow(1, 0, r).copy_(torch::matmul(x, axes.t()));
  e.labels = labels;
  e.backend = "pca";
  return e;
}

double silhouette_score(const torch::Tensor& points, const std::vector<int64_t>& labels) {
  const int64_t n = points.size(0);
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeMismatch("silhouette_score: label count mismatch");
  std::set<int64_t> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw InvalidInput("silhouette_score: need at least two clusters");
  auto d = torch::cdist(points.to(torch::kDouble), points.to(torch::kDouble)).contiguous();
  auto acc = d.accessor<double, 2>();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    std::map<int64_t, std::pair<double, int64_t>> per;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& slot = per[labels[static_cast<size_t>(j)]];
      slot.first += acc[i][j];
      slot.second += 1;
    }
    const auto own = per.find(labels[static_cast<size_t>(i)]);
    if (own == per.end() || own->second.second == 0) continue;  // singleton cluster scores 0
    const double a = own->second.first / static_cast<double>(own->second.second);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, s] : per) {
      if (label != labels[static_cast<size_t>(i)]) b = std::min(b, s.first / static_cast<double>(s.second));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

torch::Tensor attention_heatmap(const FeatureMap& fm, int64_t height, int64_t width) {
  if (fm.batch() != 1) throw InvalidInput("attention_heatmap: expects a single-example feature map");
  if (height < 1 || width < 1) throw InvalidInput("attention_heatmap: bad output size");
  torch::NoGradGuard guard;
  auto a = attention_map(fm.detached()).data().to(torch::kDouble).reshape({1, 1, fm.height(), fm.width()});
  auto up = F::interpolate(a, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{height, width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false))
                .reshape({height, width});
  const double lo = up.min().item<double>();
  const double hi = up.max().item<double>();
  // Flat up to round-off counts as constant.
  if (hi - lo <= 1e-12 * std::abs(hi)) return hi > 0.0 ? torch::ones_like(up) : torch::zeros_like(up);
  return (up - lo) / (hi - lo);
}

namespace {

// Blue to red through cyan, yellow.
std::array<double, 3> heat_color(double v) {
  const double r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  const double g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  const double b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
  return {r * 255.0, g * 255.0, b * 255.0};
}

}  // namespace

OverlayResult attention_overlay(const Image& image, const FeatureMap& fm, double blend) {
  if (image.empty()) throw InvalidInput("attention_overlay: empty image");
  if (blend < 0.0 || blend > 1.0) throw InvalidInput("attention_overlay: blend outside [0, 1]");
  OverlayResult out;
  out.heat = attention_heatmap(fm, image.height, image.width).contiguous();
  out.image = image;
  {
    torch::NoGradGuard guard;
    out.zero_attention = fm.data().abs().max().item<double>() == 0.0;
  }
  if (out.zero_attention) {
    log::warn("attention_overlay: feature map is zero, writing the plain image");
    return out;
  }
  auto h = out.heat.accessor<double, 2>();
  for (int64_t y = 0; y < image.height; ++y) {
    for (int64_t x = 0; x < image.width; ++x) {
      const auto c = heat_color(h[y][x]);
      uint8_t* px = out.image.at(x, y);
      for (int k = 0; k < 3; ++k) {
        px[k] = static_cast<uint8_t>(std::lround((1.0 - blend) * px[k] + blend * c[static_cast<size_t>(k)]));
      }
    }
  }
  return out;
}

OverlayResult attention_overlay(const Image& image, const FeatureMap& fm, const std::filesystem::path& out,
                                double blend) {
  auto result = attention_overlay(image, fm, blend);
  write_image(result.image, out);
  return result;
}

void SweepResult::validate() const {
  if (alphas.empty()) throw InvalidInput("SweepResult: empty grid");
  for (size_t i = 1; i < alphas.size(); ++i) {
    if (!(alphas[i] > alphas[i - 1])) throw InvalidInput("SweepResult: grid must be strictly increasing");
  }
  if (means.size() != alphas.size() || stds.size() != alphas.size()) {
    throw ShapeMismatch("SweepResult: one mean/std per alpha");
  }
}

double SweepResult::drop_to_last() const {
  validate();
  return *std::max_element(means.begin(), means.end()) - means.back();
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : records) runs.push_back(r.to_json());
  return {{"method", method}, {"alphas", alphas}, {"means", means}, {"stds", stds}, {"runs", runs}};
}

SweepResult SweepResult::from_json(const nlohmann::json& j) {
  SweepResult s;
  s.method = j.value("method", std::string{});
  s.alphas = j.at("alphas").get<std::vector<double>>();
  s.means = j.at("means").get<std::vector<double>>();
  s.stds = j.at("stds").get<std::vector<double>>();
  for (const auto& r : j.value("runs", nlohmann::json::array())) s.records.push_back(RunRecord::from_json(r));
  s.validate();
  return s;
}

SweepResult alpha_sweep(TransferRunner& runner, RegKind method, const std::vector<double>& alphas,
                        const std::vector<uint64_t>& seeds) {
  if (alphas.empty()) throw InvalidInput("alpha_sweep: empty grid");
  if (seeds.empty()) throw InvalidInput("alpha_sweep: no seeds");
  SweepResult s;
  s.method = to_string(method);
  s.alphas = alphas;
  s.means.resize(alphas.size());
  s.stds.resize(alphas.size());
  for (size_t i = 1; i < alphas.size(); ++i) {
    if (!(alphas[i] > alphas[i - 1])) throw InvalidInput("alpha_sweep: grid must be strictly increasing");
  }
  for (size_t i = 0; i < alphas.size(); ++i) {
    std::vector<double> acc;
    for (uint64_t seed : seeds) {
      auto run = runner.run(method, alphas[i], seed);
      acc.push_back(run.record.final_top1);
      s.records.push_back(std::move(run.record));
    }
    const auto summary = summarize(acc);
    s.means[i] = summary.mean;
    s.stds[i] = summary.std;
  }
  return s;
}

RetentionTransform parse_retention_transform(const std::string& name) {
  if (name == "identity") return RetentionTransform::kIdentity;
  if (name == "disentangler-positive" || name == "positive") return RetentionTransform::kDisentanglerPositive;
  if (name == "transform-only" || name == "target") return RetentionTransform::kTransformOnly;
  throw InvalidInput("unknown retention transform '" + name + "'");
}

namespace {

torch::Tensor probe_features(RetentionTransform transform, const TensorDataset& data, const ModelAdapter& source,
                             const DisentanglerState* dis, const ModelAdapter* transformed) {
  torch::NoGradGuard guard;
  const ModelAdapter& model = transform == RetentionTransform::kTransformOnly ? *transformed : source;
  const bool was_training = model.net().is_training();
  model.eval();
  std::mt19937_64 rng(0);
  std::vector<torch::Tensor> pooled;
  for (const auto& idx : sequential_batches(data.size(), 256)) {
    auto batch = make_batch(data, idx, false, rng);
    FeatureMap fm = model.forward(batch.inputs).features;
    if (transform == RetentionTransform::kDisentanglerPositive) fm = disentangle(fm, *dis).first;
    pooled.push_back(reduce_spatialwise(fm).data().to(torch::kDouble));
  }
  model.train(was_training);
  return torch::cat(pooled, 0);
}

}  // namespace

double source_retention_probe(RetentionTransform transform, const TensorDataset& source_train,
                              const TensorDataset& source_test, const ModelAdapter& source,
                              const DisentanglerState* dis, const ModelAdapter* transformed,
                              const RetentionOptions& options) {
  if (source_train.empty() || source_test.empty()) throw InvalidInput("source_retention_probe: empty dataset");
  if (transform == RetentionTransform::kDisentanglerPositive && dis == nullptr) {
    throw MissingArtifact("source_retention_probe: positive transform needs a disentangler");
  }
  if (transform == RetentionTransform::kTransformOnly && (transformed == nullptr || !transformed->valid())) {
    throw MissingArtifact("source_retention_probe: transform-only needs a transformed model");
  }
  auto train_x = probe_features(transform, source_train, source, dis, transformed);
  auto test_x = probe_features(transform, source_test, source, dis, transformed);
  auto mu = train_x.mean(0, true);
  auto sd = train_x.std(0, /*unbiased=*/false, true).clamp_min(1e-8);
  train_x = (train_x - mu) / sd;
  test_x = (test_x - mu) / sd;

  const int64_t c = train_x.size(1);
  const int64_t k = source_train.num_classes;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  auto weight = (torch::randn({c, k}, gen, torch::kDouble) * std::sqrt(1.0 / static_cast<double>(c)))
                    .requires_grad_(true);
  auto bias = torch::zeros({k}, torch::kDouble).requires_grad_(true);
  torch::optim::Adam opt({weight, bias}, torch::optim::AdamOptions(options.learning_rate));
  for (int64_t it = 0; it < options.iterations; ++it) {
    opt.zero_grad();
    auto loss = F::cross_entropy(torch::matmul(train_x, weight) + bias, source_train.labels);
    loss.backward();
    opt.step();
  }
  torch::NoGradGuard guard;
  auto pred = (torch::matmul(test_x, weight) + bias).argmax(1);
  const auto correct = pred.eq(source_test.labels).sum().item<int64_t>();
  return 100.0 * static_cast<double>(correct) / static_cast<double>(source_test.size());
}

const TableCell* ResultsTable::find(const std::string& dataset, const std::string& method) const {
  for (const auto& c : cells) {
    if (c.dataset == dataset && c.method == method) return &c;
  }
  return nullptr;
}

std::string ResultsTable::to_text() const {
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"dataset"});
  for (const auto& m : methods) grid.back().push_back(m);
  for (const auto& d : datasets) {
    double best = -1.0;
    for (const auto& m : methods) {
      if (const auto* c = find(d, m)) best = std::max(best, c->summary.mean);
    }
    std::vector<std::string> row{d};
    for (const auto& m : methods) {
      const auto* c = find(d, m);
      if (c == nullptr) {
        row.emplace_back("-");
        continue;
      }
      auto cell = log::format("%.2f±%.2f", c->summary.mean, c->summary.std);
      if (c->summary.mean == best) cell = "**" + cell + "**";
      row.push_back(cell);
    }
    grid.push_back(row);
  }
  // "±" is two bytes in UTF-8 but one column wide.
  const auto width = [](const std::string& s) {
    size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<size_t> widths(grid.front().size(), 0);
  for (const auto& row : grid) {
    for (size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
  }
  std::ostringstream out;
  for (const auto& row : grid) {
    for (size_t i = 0; i < row.size(); ++i) {
      out << row[i] << std::string(widths[i] - width(row[i]) + (i + 1 < row.size() ? 2 : 0), ' ');
    }
    out << "\n";
  }
  out << "top-1 %, mean±std over seeds (" << (sample_std ? "sample" : "population") << " std)\n";
  return out.str();
}

std::string ResultsTable::to_csv() const {
  std::ostringstream out;
  out << "dataset,method,mean,std,n_seeds\n";
  for (const auto& d : datasets) {
    for (const auto& m : methods) {
      if (const auto* c = find(d, m)) {
        out << d << "," << m << "," << log::format("%.4f,%.4f", c->summary.mean, c->summary.std) << ","
            << c->summary.n << "\n";
      }
    }
  }
  return out.str();
}

ResultsTable results_table(const std::vector<RunRecord>& records, bool sample_std) {
  if (records.empty()) throw InvalidInput("results_table: no run records");
  ResultsTable t;
  t.sample_std = sample_std;
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  std::vector<std::string> extra_methods;
  for (const auto& r : records) {
    if (std::find(t.datasets.begin(), t.datasets.end(), r.dataset) == t.datasets.end()) t.datasets.push_back(r.dataset);
    groups[{r.dataset, r.method}].push_back(r.final_top1);
  }
  for (RegKind k : method_order()) {
    const auto name = to_string(k);
    for (const auto& [key, v] : groups) {
      if (key.second == name) {
        t.methods.push_back(name);
        break;
      }
    }
  }
  for (const auto& r : records) {
    if (std::find(t.methods.begin(), t.methods.end(), r.method) == t.methods.end()) t.methods.push_back(r.method);
  }
  for (const auto& d : t.datasets) {
    for (const auto& m : t.methods) {
      auto it = groups.find({d, m});
      if (it != groups.end()) t.cells.push_back({d, m, summarize(it->second, sample_std)});
    }
  }
  return t;
}

}  // namespace tred
