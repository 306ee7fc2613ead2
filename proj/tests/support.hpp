#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "pdose/mlp.hpp"

namespace pdose::testing {

using MatD = nn::Matrix<double>;

/// Plain loop implementation of the network, masks given per dropout layer.
inline std::vector<double> oracle_forward(const nn::Mlp<double>& model, const std::vector<double>& x,
                                          const std::vector<std::vector<int>>& masks) {
  const auto& c = model.config();
  const auto& p = model.params();
  std::vector<double> a(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) a[i] = (x[i] - p.input_shift(i)) / p.input_scale(i);
  const std::size_t L = c.layer_count();
  for (std::size_t l = 0; l < L; ++l) {
    const auto& w = p.weights[l];
    std::vector<double> z(static_cast<std::size_t>(w.rows()), 0.0);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < w.cols(); ++k) s += w(r, k) * a[static_cast<std::size_t>(k)];
      if (c.is_dropout_layer(l) && !masks.empty()) s *= masks[c.dropout_slot(l)][static_cast<std::size_t>(r)];
      z[static_cast<std::size_t>(r)] = s + p.biases[l](r);
    }
    if (l + 1 < L)
      for (double& v : z) v = std::max(v, 0.0);
    else if (c.output_floor)
      for (double& v : z) v = std::max(v, *c.output_floor);
    a = std::move(z);
  }
  return a;
}

/// Random network with every preactivation at the batch at least `margin`
/// away from zero, so the loss is smooth in a neighbourhood of the point.
struct SmoothProblem {
  nn::Mlp<double> model;
  MatD inputs, targets;
  nn::MaskSet<double> masks;
};

inline double min_abs_preactivation(const nn::Mlp<double>& m, const MatD& x, const nn::MaskSet<double>& masks) {
  nn::ForwardCache<double> cache;
  m.forward_batch(x, masks, cache, true);
  double lo = 1e300;
  for (std::size_t l = 0; l + 1 < m.config().layer_count(); ++l) lo = std::min(lo, cache.pre[l].cwiseAbs().minCoeff());
  return lo;
}

inline SmoothProblem smooth_problem(std::uint64_t seed, double margin = 1e-3) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> wdist(1, 8), ldist(0, 2), bdist(1, 4), odist(1, 3);
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    nn::MlpConfig c;
    c.n_in = static_cast<std::size_t>(bdist(rng));
    c.width = static_cast<std::size_t>(wdist(rng));
    c.hidden_layers = static_cast<std::size_t>(ldist(rng));
    c.dropout_layers = static_cast<std::size_t>(ldist(rng));
    c.n_out = static_cast<std::size_t>(odist(rng));
    c.p_drop = 0.3;
    c.order = rng() % 2 ? nn::BlockOrder::DropoutFirst : nn::BlockOrder::HiddenFirst;
    auto p = nn::init_params<double>(c, rng());
    for (auto& b : p.biases)
      for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.5 * g(rng);
    const auto batch = static_cast<Eigen::Index>(bdist(rng));
    MatD x(static_cast<Eigen::Index>(c.n_in), batch), d(static_cast<Eigen::Index>(c.n_out), batch);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = g(rng);
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = g(rng);
    nn::Mlp<double> m(c, std::move(p));
    auto masks = nn::masks_for_seed<double>(c, rng());
    if (min_abs_preactivation(m, x, masks) > margin) return {std::move(m), x, d, masks};
  }
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients over every parameter.
inline double max_fd_relative_error(const SmoothProblem& pr, double h = 1e-5) {
  const auto g = nn::gradients(pr.model, pr.inputs, pr.targets, pr.masks).grad;
  nn::Mlp<double> m = pr.model;
  double worst = 0.0;
  auto check = [&](double& theta, double analytic) {
    const double saved = theta;
    theta = saved + h;
    const double up = nn::loss(m, pr.inputs, pr.targets, pr.masks);
    theta = saved - h;
    const double down = nn::loss(m, pr.inputs, pr.targets, pr.masks);
    theta = saved;
    const double fd = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic) / scale);
  };
  auto& p = m.mutable_params();
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    for (Eigen::Index i = 0; i < p.weights[l].size(); ++i) check(p.weights[l].data()[i], g.weights[l].data()[i]);
    for (Eigen::Index i = 0; i < p.biases[l].size(); ++i) check(p.biases[l](i), g.biases[l](i));
  }
  return worst;
}

}  // namespace pdose::testing
