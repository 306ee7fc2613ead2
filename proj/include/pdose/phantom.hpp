#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pdose/error.hpp"
#include "pdose/random.hpp"

namespace pdose {

using Vec3 = Eigen::Vector3d;

struct Material {
  std::string name;
  double density = 1.0;            // g/cm^3
  double relative_stopping = 1.0;  // multiplier on water stopping power
  double radiation_length = 36.08; // cm

  void validate() const {
    if (!(density > 0.0) || !(relative_stopping > 0.0) || !(radiation_length > 0.0))
      throw PreconditionError("material '" + name + "': density, relative stopping and X0 must be positive");
  }
};

inline Material water() { return {"water", 1.0, 1.0, 36.08}; }
inline Material bone() { return {"bone", 1.85, 1.6, 16.8}; }

/// Regular voxel grid of rank 1, 2 or 3. Unused axes hold a single voxel.
/// Linear index is i + n0 * (j + n1 * k).
class VoxelGrid {
 public:
  struct Axis {
    std::size_t count = 1;
    double lower = -0.5;
    double upper = 0.5;
  };

  VoxelGrid() = default;

  explicit VoxelGrid(std::vector<Axis> axes) : rank_(axes.size()) {
    if (axes.empty() || axes.size() > 3) throw PreconditionError("grid rank must be 1, 2 or 3");
    for (std::size_t a = 0; a < 3; ++a) {
      Axis ax = a < axes.size() ? axes[a] : Axis{};
      if (ax.count < 1) throw PreconditionError("grid dimensions must be >= 1");
      if (!(ax.upper > ax.lower)) throw PreconditionError("grid extent must be a non-empty interval");
      dims_[a] = ax.count;
      lower_[a] = ax.lower;
      upper_[a] = ax.upper;
      size_[a] = (ax.upper - ax.lower) / static_cast<double>(ax.count);
    }
  }

  std::size_t rank() const noexcept { return rank_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  const std::array<std::size_t, 3>& dims() const noexcept { return dims_; }
  double lower(std::size_t axis) const { return lower_.at(axis); }
  double upper(std::size_t axis) const { return upper_.at(axis); }
  double voxel_size(std::size_t axis) const { return size_.at(axis); }
  double voxel_volume() const noexcept { return size_[0] * size_[1] * size_[2]; }
  std::size_t voxel_count() const noexcept { return dims_[0] * dims_[1] * dims_[2]; }

  /// Dimensions of the used axes only.
  std::vector<std::size_t> shape() const { return {dims_.begin(), dims_.begin() + static_cast<long>(rank_)}; }

  std::size_t linear_index(std::size_t i, std::size_t j = 0, std::size_t k = 0) const noexcept {
    return i + dims_[0] * (j + dims_[1] * k);
  }

  std::array<std::size_t, 3> unravel(std::size_t index) const noexcept {
    const std::size_t i = index % dims_[0];
    const std::size_t rest = index / dims_[0];
    return {i, rest % dims_[1], rest / dims_[1]};
  }

  double centre(std::size_t axis, std::size_t index) const {
    return lower_.at(axis) + (static_cast<double>(index) + 0.5) * size_.at(axis);
  }

  bool contains(const Vec3& p) const noexcept {
    for (std::size_t a = 0; a < 3; ++a)
      if (!(p[a] >= lower_[a] && p[a] <= upper_[a])) return false;
    return true;
  }

  /// Index of the voxel containing `coord` along `axis`. Points on an internal
  /// voxel face resolve to the lower-index voxel.
  std::size_t axis_index(std::size_t axis, double coord) const {
    if (!(coord >= lower_[axis] && coord <= upper_[axis]))
      throw RangeError("coordinate " + std::to_string(coord) + " outside grid axis " + std::to_string(axis));
    const double u = (coord - lower_[axis]) / size_[axis];
    double cell = std::ceil(u) - 1.0;
    if (cell < 0.0) cell = 0.0;
    const auto idx = static_cast<std::size_t>(cell);
    return idx < dims_[axis] ? idx : dims_[axis] - 1;
  }

  std::size_t voxel_at(const Vec3& p) const {
    return linear_index(axis_index(0, p[0]), axis_index(1, p[1]), axis_index(2, p[2]));
  }

  /// Same as voxel_at but returns false instead of throwing outside the grid.
  bool try_voxel_at(const Vec3& p, std::size_t& out) const noexcept {
    if (!contains(p)) return false;
    std::size_t idx[3];
    for (std::size_t a = 0; a < 3; ++a) {
      const double u = (p[a] - lower_[a]) / size_[a];
      double cell = std::ceil(u) - 1.0;
      if (cell < 0.0) cell = 0.0;
      idx[a] = static_cast<std::size_t>(cell);
      if (idx[a] >= dims_[a]) idx[a] = dims_[a] - 1;
    }
    out = linear_index(idx[0], idx[1], idx[2]);
    return true;
  }

  friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;

 private:
  std::size_t rank_ = 1;
  std::array<std::size_t, 3> dims_{1, 1, 1};
  std::array<double, 3> lower_{-0.5, -0.5, -0.5};
  std::array<double, 3> upper_{0.5, 0.5, 0.5};
  std::array<double, 3> size_{1.0, 1.0, 1.0};
};

class Phantom {
 public:
  Phantom(VoxelGrid grid, std::vector<Material> materials, std::vector<std::uint8_t> material_map)
      : grid_(std::move(grid)), materials_(std::move(materials)), map_(std::move(material_map)) {
    if (materials_.empty()) throw PreconditionError("phantom needs at least one material");
    for (const auto& m : materials_) m.validate();
    if (map_.size() != grid_.voxel_count()) throw ShapeError("material map size does not match grid");
    for (auto idx : map_)
      if (idx >= materials_.size()) throw PreconditionError("material map references unknown material");
  }

  const VoxelGrid& grid() const noexcept { return grid_; }
  const std::vector<Material>& materials() const noexcept { return materials_; }
  const std::vector<std::uint8_t>& material_map() const noexcept { return map_; }
  const Material& voxel_material(std::size_t voxel) const { return materials_[map_.at(voxel)]; }

 private:
  VoxelGrid grid_;
  std::vector<Material> materials_;
  std::vector<std::uint8_t> map_;
};

inline Phantom build_homogeneous_phantom(const Material& material, const VoxelGrid& grid) {
  return Phantom(grid, {material}, std::vector<std::uint8_t>(grid.voxel_count(), 0));
}

/// Water phantom with a bone slab along x occupying (-2.5 + x1 - x2, 2.5 + x1 + x2).
/// A voxel is bone when its x-centre lies strictly inside the slab.
inline Phantom build_slab_phantom(double x1, double x2, const VoxelGrid& grid,
                                  const Material& background = water(), const Material& slab = bone()) {
  const double lo = -2.5 + x1 - x2;
  const double hi = 2.5 + x1 + x2;
  if (!(x2 > -2.5)) throw GeometryError("bone slab interval is empty (x2 <= -2.5)");
  std::vector<std::uint8_t> map(grid.voxel_count(), 0);
  for (std::size_t i = 0; i < grid.dim(0); ++i) {
    const double c = grid.centre(0, i);
    if (!(c > lo && c < hi)) continue;
    for (std::size_t k = 0; k < grid.dim(2); ++k)
      for (std::size_t j = 0; j < grid.dim(1); ++j) map[grid.linear_index(i, j, k)] = 1;
  }
  return Phantom(grid, {background, slab}, std::move(map));
}

inline const Material& material_at(const Phantom& phantom, const Vec3& position) {
  return phantom.voxel_material(phantom.grid().voxel_at(position));
}

inline const Material& material_at(const Phantom& phantom, double x, double y = 0.0, double z = 0.0) {
  return material_at(phantom, Vec3(x, y, z));
}

/// Pencil-beam description. `direction` must be a unit vector.
struct BeamSpec {
  Vec3 entry = Vec3::Zero();
  Vec3 direction = Vec3(1.0, 0.0, 0.0);
  double spatial_sigma = 0.0;  // cm, transverse
  double angular_sigma = 0.0;  // rad, per projected angle
  double energy_mean = 150.0;  // MeV
  double energy_sigma = 0.0;   // MeV

  void validate() const {
    if (!(energy_mean > 0.0)) throw ConfigError("beam energy mean must be positive");
    if (spatial_sigma < 0.0 || angular_sigma < 0.0 || energy_sigma < 0.0)
      throw ConfigError("beam spreads must be non-negative");
    if (std::abs(direction.norm() - 1.0) > 1e-12) throw ConfigError("beam direction is not normalised");
  }

  /// Direction in the x-y plane at polar angle `theta` from +x.
  static Vec3 in_plane_direction(double theta) { return {std::cos(theta), std::sin(theta), 0.0}; }
};

using InputVector = std::vector<double>;

/// Independent Gaussian marginals for each input component.
struct InputDistribution {
  std::vector<double> mean;
  std::vector<double> sigma;
  std::vector<std::string> tags;

  std::size_t dim() const noexcept { return mean.size(); }

  void validate() const {
    if (mean.empty()) throw PreconditionError("input distribution has no components");
    if (sigma.size() != mean.size()) throw ShapeError("mean and sigma lengths differ");
    if (!tags.empty() && tags.size() != mean.size()) throw ShapeError("tag count differs from dimension");
    for (double s : sigma)
      if (!(s >= 0.0)) throw PreconditionError("standard deviations must be non-negative");
  }

  /// Same distribution with each mean moved by `k` standard deviations.
  InputDistribution shifted(double k) const {
    InputDistribution out = *this;
    for (std::size_t i = 0; i < mean.size(); ++i) out.mean[i] += k * sigma[i];
    return out;
  }

  /// Same means, zero spread.
  InputDistribution point_mass() const {
    InputDistribution out = *this;
    std::fill(out.sigma.begin(), out.sigma.end(), 0.0);
    return out;
  }
};

inline std::vector<InputVector> sample_inputs(const InputDistribution& dist, std::size_t count, std::uint64_t seed) {
  dist.validate();
  if (count < 1) throw PreconditionError("sample_inputs: count must be >= 1");
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<InputVector> out(count, InputVector(dist.dim()));
  for (auto& x : out)
    for (std::size_t i = 0; i < dist.dim(); ++i) {
      const double z = gauss(rng);
      x[i] = dist.sigma[i] == 0.0 ? dist.mean[i] : dist.mean[i] + dist.sigma[i] * z;
    }
  return out;
}

namespace distributions {

/// (alpha, p, rho, E_peak) for the 1-D analytic benchmark.
inline InputDistribution bragg_kleeman() {
  return {{0.00246, 1.75, 1.0, 130.0}, {0.000128, 0.0102, 0.01, 5.0}, {"alpha", "p", "rho", "E_peak"}};
}

/// Bone slab position and thickness shifts (cm).
inline InputDistribution slab_shift() { return {{0.0, 0.0}, {0.1, 0.1}, {"x1_position", "x2_thickness"}}; }

/// Slab shifts plus beam angle (rad) and energy (MeV) shifts.
inline InputDistribution slab_and_beam() {
  return {{0.0, 0.0, 0.0, 0.0},
          {0.1, 0.1, 3.14159265358979323846 / 60.0, 5.0},
          {"x1_position", "x2_thickness", "x3_angle", "x4_energy"}};
}

/// Lateral beam misalignment (cm).
inline InputDistribution beam_shift() { return {{0.0, 0.0}, {1.0, 1.0}, {"x1_shift", "x2_shift"}}; }

}  // namespace distributions

}  // namespace pdose
