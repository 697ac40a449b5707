#pragma once

// Independent reference implementations for tests: plain loops over
// std::vector and Eigen, no torch arithmetic in the computed quantity.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const torch::Tensor& t) {
  auto d = t.detach().to(torch::kDouble).contiguous();
  Rows out(static_cast<size_t>(d.size(0)), std::vector<double>(static_cast<size_t>(d.size(1))));
  auto a = d.accessor<double, 2>();
  for (int64_t i = 0; i < d.size(0); ++i) {
    for (int64_t j = 0; j < d.size(1); ++j) out[i][j] = a[i][j];
  }
  return out;
}

inline double sqdist(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s;
}

inline double rbf(const std::vector<double>& x, const std::vector<double>& y, double sigma) {
  return std::exp(-sqdist(x, y) / (2.0 * sigma * sigma));
}

/// Biased MMD² by three explicit double loops.
inline double mmd2(const Rows& x, const Rows& y, double sigma) {
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (const auto& a : x)
    for (const auto& b : x) kxx += rbf(a, b, sigma);
  for (const auto& a : y)
    for (const auto& b : y) kyy += rbf(a, b, sigma);
  for (const auto& a : x)
    for (const auto& b : y) kxy += rbf(a, b, sigma);
  const double m = static_cast<double>(x.size()), n = static_cast<double>(y.size());
  return kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n);
}

/// Median of pairwise distances over the union (self-pairs excluded).
inline double median_distance(const Rows& x, const Rows& y) {
  Rows all = x;
  all.insert(all.end(), y.begin(), y.end());
  std::vector<double> d;
  for (size_t i = 0; i < all.size(); ++i)
    for (size_t j = i + 1; j < all.size(); ++j) d.push_back(std::sqrt(sqdist(all[i], all[j])));
  std::sort(d.begin(), d.end());
  const size_t n = d.size();
  return n % 2 == 1 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

inline Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto d = t.detach().to(torch::kDouble).contiguous();
  Eigen::MatrixXd m(d.size(0), d.size(1));
  auto a = d.accessor<double, 2>();
  for (int64_t i = 0; i < d.size(0); ++i)
    for (int64_t j = 0; j < d.size(1); ++j) m(i, j) = a[i][j];
  return m;
}

/// Singular values as square roots of the Gram matrix eigenvalues, descending.
inline std::vector<double> gram_singular_values(const Eigen::MatrixXd& a) {
  const Eigen::MatrixXd g = a.rows() <= a.cols() ? Eigen::MatrixXd(a * a.transpose())
                                                 : Eigen::MatrixXd(a.transpose() * a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  std::vector<double> s;
  for (int i = 0; i < es.eigenvalues().size(); ++i) s.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

/// Central finite differences of a scalar function of a double tensor,
/// compared with autograd: max_i |fd_i - ad_i| / max(max_i |fd_i|, max_i |ad_i|).
inline double gradient_check(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                             double step = 1e-4) {
  x = x.detach().to(torch::kDouble).clone().requires_grad_(true);
  auto y = f(x);
  auto grad = torch::autograd::grad({y}, {x})[0].contiguous();
  auto flat = x.detach().clone().contiguous().view(-1);
  auto g = grad.view(-1);
  double diff = 0.0, scale = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    auto xp = flat.clone();
    xp[i] = orig + step;
    auto xm = flat.clone();
    xm[i] = orig - step;
    double fp, fm;
    {
      torch::NoGradGuard guard;
      fp = f(xp.view(x.sizes())).item<double>();
      fm = f(xm.view(x.sizes())).item<double>();
    }
    const double fd = (fp - fm) / (2.0 * step);
    const double ad = g[i].item<double>();
    diff = std::max(diff, std::abs(fd - ad));
    scale = std::max({scale, std::abs(fd), std::abs(ad)});
  }
  return scale > 0.0 ? diff / scale : diff;
}

inline torch::Tensor randn(std::vector<int64_t> shape, uint64_t seed, torch::Dtype dtype = torch::kDouble) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::TensorOptions().dtype(dtype));
}

}  // namespace oracle
