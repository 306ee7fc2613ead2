#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <boost/math/distributions/normal.hpp>

#include "pdose/error.hpp"
#include "pdose/phantom.hpp"
#include "pdose/random.hpp"

namespace pdose::uq {

/// Anything that produces stochastic forward passes. `sample_passes(x, first,
/// count, seed)` returns an output_dim x count matrix whose column k is pass
/// first + k; passes with distinct indices must be independent draws.
template <class M>
concept StochasticModel = requires(const M& m, std::span<const double> x, std::size_t n, std::uint64_t s) {
  { m.output_dim() } -> std::convertible_to<std::size_t>;
  { m.sample_passes(x, n, n, s) } -> std::convertible_to<Eigen::MatrixXd>;
};

struct EnsembleStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // unbiased, divisor T - 1
  std::size_t passes = 0;

  Eigen::VectorXd stddev() const { return variance.cwiseMax(0.0).cwiseSqrt(); }
};

/// Streaming mean / sum-of-squares, merged chunk by chunk (Chan et al.).
class MomentAccumulator {
 public:
  explicit MomentAccumulator(std::size_t dim) : mean_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
                                                 m2_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))) {}

  void add_columns(const Eigen::MatrixXd& block) {
    const auto nb = static_cast<double>(block.cols());
    if (nb == 0) return;
    // Moments about the first column.
    const Eigen::VectorXd ref = block.col(0);
    const Eigen::MatrixXd dev = block.colwise() - ref;
    const Eigen::VectorXd dmean = dev.rowwise().mean();
    const Eigen::VectorXd bmean = ref + dmean;
    const Eigen::VectorXd bm2 = (dev.colwise() - dmean).rowwise().squaredNorm();
    const double na = static_cast<double>(count_);
    const double n = na + nb;
    const Eigen::VectorXd delta = bmean - mean_;
    mean_ += delta * (nb / n);
    m2_ += bm2 + delta.cwiseProduct(delta) * (na * nb / n);
    count_ += static_cast<std::size_t>(nb);
  }

  std::size_t count() const noexcept { return count_; }
  const Eigen::VectorXd& mean() const noexcept { return mean_; }
  Eigen::VectorXd variance() const {
    if (count_ < 2) return Eigen::VectorXd::Zero(mean_.size());
    return m2_ / static_cast<double>(count_ - 1);
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
  std::size_t count_ = 0;
};

inline constexpr std::size_t kPassChunk = 256;

/// Mean and unbiased variance of T stochastic passes at input `x`.
template <StochasticModel M>
EnsembleStats dropout_ensemble(const M& model, std::span<const double> x, std::size_t passes, std::uint64_t seed) {
  if (passes < 2) throw ConfigError("dropout_ensemble: need T >= 2 passes");
  MomentAccumulator acc(model.output_dim());
  for (std::size_t first = 0; first < passes; first += kPassChunk) {
    const std::size_t n = std::min(kPassChunk, passes - first);
    acc.add_columns(model.sample_passes(x, first, n, seed));
  }
  return {acc.mean(), acc.variance(), passes};
}

/// All T pass outputs (output_dim x T), for histograms and pooled statistics.
template <StochasticModel M>
Eigen::MatrixXd ensemble_outputs(const M& model, std::span<const double> x, std::size_t passes, std::uint64_t seed) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(model.output_dim()), static_cast<Eigen::Index>(passes));
  for (std::size_t first = 0; first < passes; first += kPassChunk) {
    const std::size_t n = std::min(kPassChunk, passes - first);
    out.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(n)) =
        model.sample_passes(x, first, n, seed);
  }
  return out;
}

struct VarianceDecomposition {
  Eigen::VectorXd grand_mean;
  Eigen::VectorXd epistemic;
  Eigen::VectorXd parametric;
  Eigen::VectorXd total;
  std::size_t outer_samples = 0;
  std::size_t inner_passes = 0;
};

/// Nested estimator over given inputs: epistemic = mean of per-input dropout
/// variances, parametric = unbiased variance of per-input ensemble means.
/// Input s uses ensemble seed split_seed(seed, s + 1).
template <StochasticModel M>
VarianceDecomposition decompose_inputs(const M& model, std::span<const InputVector> inputs, std::size_t passes,
                                       std::uint64_t seed, std::vector<EnsembleStats>* per_input = nullptr) {
  const std::size_t S = inputs.size();
  if (S < 2) throw PreconditionError("decompose: need S >= 2 outer samples");
  if (passes < 2) throw ConfigError("decompose: need T >= 2 passes");
  const auto dim = static_cast<Eigen::Index>(model.output_dim());
  Eigen::VectorXd epi_sum = Eigen::VectorXd::Zero(dim);
  MomentAccumulator means(model.output_dim());
  Eigen::MatrixXd mean_col(dim, 1);
  for (std::size_t s = 0; s < S; ++s) {
    auto stats = dropout_ensemble(model, inputs[s], passes, split_seed(seed, s + 1));
    epi_sum += stats.variance;
    mean_col.col(0) = stats.mean;
    means.add_columns(mean_col);
    if (per_input) per_input->push_back(std::move(stats));
  }
  VarianceDecomposition d;
  d.grand_mean = means.mean();
  d.epistemic = epi_sum / static_cast<double>(S);
  d.parametric = means.variance();
  d.total = d.epistemic + d.parametric;
  d.outer_samples = S;
  d.inner_passes = passes;
  return d;
}

/// Draws S inputs from `dist` (seed split_seed(seed, 0)) and decomposes.
template <StochasticModel M>
VarianceDecomposition decompose(const M& model, const InputDistribution& dist, std::size_t outer, std::size_t passes,
                                std::uint64_t seed) {
  if (outer < 2) throw PreconditionError("decompose: need S >= 2 outer samples");
  if (passes < 2) throw ConfigError("decompose: need T >= 2 passes");
  const auto inputs = sample_inputs(dist, outer, split_seed(seed, 0));
  return decompose_inputs(model, std::span<const InputVector>(inputs), passes, seed);
}

/// Input with its reference output.
struct LabelledInput {
  InputVector x;
  Eigen::VectorXd d;
};

struct CoverageReport {
  std::vector<double> levels;
  std::vector<double> empirical;
  std::size_t components = 0;
  bool degenerate = false;  // every ensemble variance was zero

  void write_csv(std::ostream& os) const {
    os << "nominal,empirical\n";
    for (std::size_t i = 0; i < levels.size(); ++i) os << levels[i] << ',' << empirical[i] << '\n';
  }
};

/// Two-sided Gaussian multiplier for central coverage `level`.
inline double gaussian_multiplier(double level) {
  const boost::math::normal_distribution<double> unit(0.0, 1.0);
  return boost::math::quantile(unit, 0.5 * (1.0 + level));
}

inline void check_levels(std::span<const double> levels) {
  if (levels.empty()) throw PreconditionError("coverage: no levels given");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] > 0.0 && levels[i] < 1.0)) throw PreconditionError("coverage levels must lie in (0,1)");
    if (i > 0 && !(levels[i] > levels[i - 1])) throw PreconditionError("coverage levels must be increasing");
  }
}

/// Fraction of (sample, component) pairs with truth inside mean +- z * sd.
/// A zero-width interval covers only an exact hit.
inline CoverageReport coverage_from_stats(std::span<const Eigen::VectorXd> means, std::span<const Eigen::VectorXd> sds,
                                          std::span<const Eigen::VectorXd> truths, std::span<const double> levels) {
  check_levels(levels);
  if (means.empty()) throw PreconditionError("coverage: empty test set");
  if (means.size() != sds.size() || means.size() != truths.size()) throw ShapeError("coverage: input sizes differ");
  CoverageReport rep;
  rep.levels.assign(levels.begin(), levels.end());
  std::vector<std::size_t> hits(levels.size(), 0);
  std::vector<double> z(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) z[l] = gaussian_multiplier(levels[l]);
  bool any_spread = false;
  for (std::size_t i = 0; i < means.size(); ++i) {
    if (means[i].size() != truths[i].size() || sds[i].size() != truths[i].size())
      throw ShapeError("coverage: component count mismatch");
    for (Eigen::Index j = 0; j < truths[i].size(); ++j) {
      const double r = std::abs(truths[i](j) - means[i](j));
      const double sd = sds[i](j);
      if (sd > 0.0) any_spread = true;
      for (std::size_t l = 0; l < levels.size(); ++l)
        if (r <= z[l] * sd) ++hits[l];
    }
    rep.components += static_cast<std::size_t>(truths[i].size());
  }
  rep.degenerate = !any_spread;
  for (std::size_t l = 0; l < levels.size(); ++l)
    rep.empirical.push_back(static_cast<double>(hits[l]) / static_cast<double>(rep.components));
  return rep;
}

/// Pair i is evaluated with ensemble seed split_seed(seed, i).
template <StochasticModel M>
CoverageReport coverage(const M& model, std::span<const LabelledInput> pairs, std::span<const double> levels,
                        std::size_t passes, std::uint64_t seed) {
  if (pairs.empty()) throw PreconditionError("coverage: empty test set");
  std::vector<Eigen::VectorXd> means, sds, truths;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto stats = dropout_ensemble(model, pairs[i].x, passes, split_seed(seed, i));
    means.push_back(stats.mean);
    sds.push_back(stats.stddev());
    truths.push_back(pairs[i].d);
  }
  return coverage_from_stats(means, sds, truths, levels);
}

enum class ConformalPooling { Global, PerComponent };

struct CalibrationOffset {
  double level = 0.9;               // 1 - alpha
  ConformalPooling pooling = ConformalPooling::Global;
  std::vector<double> half_width;   // one entry, or one per component

  double at(std::size_t component) const {
    return pooling == ConformalPooling::Global ? half_width.at(0) : half_width.at(component);
  }
};

/// Split-conformal quantile: the ceil((1 - alpha)(n + 1))-th smallest
/// residual, or +infinity when that rank exceeds n.
inline double conformal_quantile(std::vector<double> residuals, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw PreconditionError("conformal: alpha must lie in (0,1)");
  if (residuals.empty()) throw PreconditionError("conformal: empty calibration set");
  const auto n = residuals.size();
  const auto rank = static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(n + 1) - 1e-12));
  if (rank > n) return std::numeric_limits<double>::infinity();
  std::nth_element(residuals.begin(), residuals.begin() + static_cast<long>(rank - 1), residuals.end());
  return residuals[rank - 1];
}

/// Calibration from precomputed ensemble means.
inline CalibrationOffset conformal_from_means(std::span<const Eigen::VectorXd> means,
                                              std::span<const Eigen::VectorXd> truths, double alpha,
                                              ConformalPooling pooling = ConformalPooling::Global) {
  if (means.empty()) throw PreconditionError("conformal: empty calibration set");
  if (means.size() != truths.size()) throw ShapeError("conformal: size mismatch");
  CalibrationOffset off;
  off.level = 1.0 - alpha;
  off.pooling = pooling;
  const auto m = static_cast<std::size_t>(truths.front().size());
  if (pooling == ConformalPooling::Global) {
    std::vector<double> res;
    for (std::size_t i = 0; i < means.size(); ++i)
      for (Eigen::Index j = 0; j < truths[i].size(); ++j) res.push_back(std::abs(truths[i](j) - means[i](j)));
    off.half_width.push_back(conformal_quantile(std::move(res), alpha));
  } else {
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<double> res;
      for (std::size_t i = 0; i < means.size(); ++i)
        res.push_back(std::abs(truths[i](static_cast<Eigen::Index>(j)) - means[i](static_cast<Eigen::Index>(j))));
      off.half_width.push_back(conformal_quantile(std::move(res), alpha));
    }
  }
  return off;
}

template <StochasticModel M>
CalibrationOffset conformal_calibrate(const M& model, std::span<const LabelledInput> calibration, double alpha,
                                      std::size_t passes, std::uint64_t seed,
                                      ConformalPooling pooling = ConformalPooling::Global) {
  if (calibration.empty()) throw PreconditionError("conformal: empty calibration set");
  std::vector<Eigen::VectorXd> means, truths;
  for (std::size_t i = 0; i < calibration.size(); ++i) {
    means.push_back(dropout_ensemble(model, calibration[i].x, passes, split_seed(seed, i)).mean);
    truths.push_back(calibration[i].d);
  }
  return conformal_from_means(means, truths, alpha, pooling);
}

/// Fraction of components of the truths inside mean +- calibrated half-width.
inline double calibrated_coverage(const CalibrationOffset& offset, std::span<const Eigen::VectorXd> means,
                                  std::span<const Eigen::VectorXd> truths) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < means.size(); ++i)
    for (Eigen::Index j = 0; j < truths[i].size(); ++j) {
      if (std::abs(truths[i](j) - means[i](j)) <= offset.at(static_cast<std::size_t>(j))) ++hit;
      ++total;
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

/// Components forming the distal 20% by index (index order = depth order).
inline std::vector<std::size_t> distal_region(std::size_t components) {
  std::vector<std::size_t> region;
  for (auto j = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(components))); j < components; ++j)
    region.push_back(j);
  return region;
}

inline std::vector<std::size_t> full_region(std::size_t components) {
  std::vector<std::size_t> region(components);
  std::iota(region.begin(), region.end(), std::size_t{0});
  return region;
}

struct InflationResult {
  double kappa = 0.0;
  double in_distribution = 0.0;   // region-mean epistemic variance
  double out_of_distribution = 0.0;
};

inline double region_mean(const Eigen::VectorXd& v, std::span<const std::size_t> region) {
  double s = 0.0;
  for (auto j : region) {
    if (j >= static_cast<std::size_t>(v.size())) throw RangeError("variance_inflation: region index out of range");
    s += v(static_cast<Eigen::Index>(j));
  }
  return s / static_cast<double>(region.size());
}

/// Ratio of region-averaged epistemic variance under `ood` to that under `id`.
template <StochasticModel M>
InflationResult variance_inflation(const M& model, std::span<const std::size_t> region, const InputDistribution& id,
                                   const InputDistribution& ood, std::size_t outer, std::size_t passes,
                                   std::uint64_t seed) {
  if (region.empty()) throw PreconditionError("variance_inflation: empty region");
  const auto d_id = decompose(model, id, outer, passes, split_seed(seed, 0));
  const auto d_ood = decompose(model, ood, outer, passes, split_seed(seed, 1));
  InflationResult r;
  r.in_distribution = region_mean(d_id.epistemic, region);
  r.out_of_distribution = region_mean(d_ood.epistemic, region);
  if (!(r.in_distribution > 0.0)) throw NumericError("variance_inflation: zero in-distribution epistemic variance");
  r.kappa = r.out_of_distribution / r.in_distribution;
  return r;
}

struct ErrorMaps {
  Eigen::VectorXd absolute;
  Eigen::VectorXd normalised;  // +infinity where the ensemble spread is zero
};

inline ErrorMaps normalised_error_from_stats(const EnsembleStats& stats, const Eigen::VectorXd& truth) {
  if (truth.size() != stats.mean.size()) throw ShapeError("normalised_error: size mismatch");
  ErrorMaps e;
  e.absolute = (truth - stats.mean).cwiseAbs();
  e.normalised.resize(truth.size());
  const Eigen::VectorXd sd = stats.stddev();
  for (Eigen::Index j = 0; j < truth.size(); ++j)
    e.normalised(j) = sd(j) > 0.0 ? e.absolute(j) / sd(j) : std::numeric_limits<double>::infinity();
  return e;
}

template <StochasticModel M>
ErrorMaps normalised_error(const M& model, std::span<const double> x, const Eigen::VectorXd& truth, std::size_t passes,
                           std::uint64_t seed) {
  return normalised_error_from_stats(dropout_ensemble(model, x, passes, seed), truth);
}

}  // namespace pdose::uq
