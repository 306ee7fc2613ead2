#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "pdose/error.hpp"

namespace pdose::analytic {

/// Bragg-Kleeman range-energy parameters R = alpha * E^p.
struct BraggKleemanParams {
  double alpha = 0.00246;  // cm MeV^-p
  double p = 1.75;
  double rho = 1.0;        // g/cm^3
  double E_peak = 130.0;   // MeV

  void validate() const {
    if (!(alpha > 0.0) || !(p > 1.0) || !(rho > 0.0) || !(E_peak > 0.0))
      throw PreconditionError("Bragg-Kleeman parameters require alpha > 0, p > 1, rho > 0, E_peak > 0");
  }
};

/// Voxel edges z_0 < z_1 < ... < z_M along depth.
class DepthGrid {
 public:
  DepthGrid(double depth, std::size_t voxels) {
    if (voxels < 1 || !(depth > 0.0)) throw PreconditionError("depth grid needs >= 1 voxel and positive extent");
    edges_.resize(voxels + 1);
    for (std::size_t i = 0; i <= voxels; ++i) edges_[i] = depth * static_cast<double>(i) / static_cast<double>(voxels);
  }

  explicit DepthGrid(std::vector<double> edges) : edges_(std::move(edges)) {
    if (edges_.size() < 2) throw PreconditionError("depth grid needs at least two edges");
    if (edges_.front() < 0.0) throw PreconditionError("depth grid must start at depth >= 0");
    for (std::size_t i = 1; i < edges_.size(); ++i)
      if (!(edges_[i] > edges_[i - 1])) throw PreconditionError("depth grid edges must be strictly increasing");
  }

  std::size_t size() const noexcept { return edges_.size() - 1; }
  const std::vector<double>& edges() const noexcept { return edges_; }
  double centre(std::size_t i) const { return 0.5 * (edges_.at(i) + edges_.at(i + 1)); }
  double extent() const noexcept { return edges_.back(); }

  std::vector<double> centres() const {
    std::vector<double> c(size());
    for (std::size_t i = 0; i < size(); ++i) c[i] = centre(i);
    return c;
  }

 private:
  std::vector<double> edges_;
};

/// Per-voxel dose in MeV cm^2/g per incident particle, indexed like the grid.
struct DoseCurve {
  std::vector<double> depth;  // voxel centres, cm
  std::vector<double> dose;

  void write_csv(std::ostream& os) const {
    os << "depth_cm,dose\n";
    os.precision(17);
    for (std::size_t i = 0; i < depth.size(); ++i) os << depth[i] << ',' << dose[i] << '\n';
  }
};

inline double csda_range(const BraggKleemanParams& params, double energy) {
  if (!(energy >= 0.0)) throw PreconditionError("csda_range: energy must be >= 0");
  return params.alpha * std::pow(energy, params.p);
}

/// Depth-dose of a monoenergetic beam under continuous slowing down. The
/// stopping power diverges at the end of range, so each voxel is integrated in
/// closed form: E(z) = ((R - z) / alpha)^(1/p) telescopes across voxels.
inline DoseCurve depth_dose_mono(const BraggKleemanParams& params, const DepthGrid& grid, double energy) {
  params.validate();
  if (!(energy > 0.0)) throw PreconditionError("depth_dose_mono: energy must be positive");
  const double range = csda_range(params, energy);
  const double inv_p = 1.0 / params.p;
  const double scale = 1.0 / (std::pow(params.alpha, inv_p) * params.rho);
  const auto& e = grid.edges();

  DoseCurve curve{grid.centres(), std::vector<double>(grid.size(), 0.0)};
  double upper = std::pow(std::max(range - e[0], 0.0), inv_p);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (e[i] >= range) break;
    const double lower = std::pow(std::max(range - e[i + 1], 0.0), inv_p);
    curve.dose[i] = (upper - lower) * scale;
    upper = lower;
  }
  return curve;
}

/// Energies at the midpoint quantiles (k + 1/2) / K of N(mean, variance).
inline std::vector<double> spectrum_nodes(double mean, double variance, std::size_t nodes) {
  if (nodes < 1) throw PreconditionError("spectrum needs at least one node");
  if (!(variance >= 0.0)) throw PreconditionError("spectrum variance must be >= 0");
  std::vector<double> energies(nodes, mean);
  if (variance > 0.0) {
    const boost::math::normal_distribution<double> unit(0.0, 1.0);
    const double sd = std::sqrt(variance);
    for (std::size_t k = 0; k < nodes; ++k) {
      const double q = (static_cast<double>(k) + 0.5) / static_cast<double>(nodes);
      energies[k] = mean + sd * boost::math::quantile(unit, q);
    }
  }
  for (double en : energies)
    if (!(en > 0.0)) throw SpectrumError("spectrum node energy " + std::to_string(en) + " MeV is not positive");
  return energies;
}

inline DoseCurve depth_dose_spectrum(const BraggKleemanParams& params, const DepthGrid& grid,
                                     double spectrum_variance, std::size_t nodes = 64) {
  params.validate();
  const auto energies = spectrum_nodes(params.E_peak, spectrum_variance, nodes);
  DoseCurve out{grid.centres(), std::vector<double>(grid.size(), 0.0)};
  for (double en : energies) {
    const auto mono = depth_dose_mono(params, grid, en);
    for (std::size_t i = 0; i < grid.size(); ++i) out.dose[i] += mono.dose[i];
  }
  const double w = 1.0 / static_cast<double>(energies.size());
  for (double& d : out.dose) d *= w;
  return out;
}

/// Depth distal of the maximum where dose first drops below `fraction` of the
/// peak, interpolated linearly between voxel centres.
inline double distal_edge(const std::vector<double>& depth, const std::vector<double>& dose, double fraction = 0.8) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw PreconditionError("distal_edge: fraction must lie in (0,1)");
  if (depth.size() != dose.size() || dose.empty()) throw ShapeError("distal_edge: depth/dose size mismatch");
  const auto peak_it = std::max_element(dose.begin(), dose.end());
  const double peak = *peak_it;
  if (!(peak > 0.0)) throw PreconditionError("distal_edge: curve has no positive maximum");
  const auto peak_idx = static_cast<std::size_t>(peak_it - dose.begin());
  const double threshold = fraction * peak;
  for (std::size_t j = peak_idx + 1; j < dose.size(); ++j) {
    if (dose[j] < threshold) {
      const double d0 = dose[j - 1];
      const double d1 = dose[j];
      const double t = (d0 - threshold) / (d0 - d1);
      return depth[j - 1] + t * (depth[j] - depth[j - 1]);
    }
  }
  throw EdgeNotFoundError("distal_edge: dose never falls below threshold inside the grid");
}

inline double distal_edge(const DoseCurve& curve, double fraction = 0.8) {
  return distal_edge(curve.depth, curve.dose, fraction);
}

}  // namespace pdose::analytic
