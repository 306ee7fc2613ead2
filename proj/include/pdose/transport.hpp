#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>
#include <utility>
#include <vector>

#include "pdose/analytic1d.hpp"
#include "pdose/error.hpp"
#include "pdose/phantom.hpp"
#include "pdose/random.hpp"

namespace pdose::transport {

inline constexpr double kProtonMass = 938.272;  // MeV
inline constexpr double kWaterDensity = 1.0;    // g/cm^3

struct TransportConfig {
  double step_length = 0.05;            // cm
  double e_min = 1.0;                   // MeV
  double straggling_coefficient = 0.087;  // MeV^2/cm in water, scaled by relative density
  double highland_constant = 14.1;      // MeV
  std::size_t max_steps = 100000;
  bool straggling = true;
  bool scattering = true;
  // Water Bragg-Kleeman constants used for the stopping power.
  double water_alpha = 0.00246;
  double water_p = 1.75;
  // Worker threads, 0 = hardware concurrency.
  unsigned threads = 0;
  // Fixed-order chunk reduction; bit-identical for any thread count.
  bool deterministic = true;

  void validate() const {
    if (!(step_length > 0.0)) throw ConfigError("step length must be positive");
    if (!(e_min > 0.0)) throw ConfigError("E_min must be positive");
    if (straggling_coefficient < 0.0) throw ConfigError("straggling coefficient must be >= 0");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (!(water_alpha > 0.0) || !(water_p > 1.0)) throw ConfigError("invalid water Bragg-Kleeman constants");
  }

  analytic::BraggKleemanParams water_params(double energy = 150.0) const {
    return {water_alpha, water_p, kWaterDensity, energy};
  }
};

/// dE/dz for protons in water from the inverted Bragg-Kleeman relation,
/// S(E) = E^(1-p) / (p alpha).
inline double water_stopping_power(double energy, const TransportConfig& cfg = {}) {
  if (!(energy >= cfg.e_min)) throw DomainError("water_stopping_power: energy below E_min");
  return std::pow(energy, 1.0 - cfg.water_p) / (cfg.water_p * cfg.water_alpha);
}

/// Analytic range-straggling width in water from a constant energy-loss
/// variance rate k: sigma_R^2 = int_0^E k / S(E')^3 dE'.
inline double range_straggling_sigma(double energy, const TransportConfig& cfg = {}) {
  const double pa = cfg.water_p * cfg.water_alpha;
  const double expo = 3.0 * cfg.water_p - 2.0;
  return std::sqrt(cfg.straggling_coefficient * pa * pa * pa * std::pow(energy, expo) / expo);
}

/// Relativistic momentum times velocity for a proton of kinetic energy T.
inline double proton_pv(double kinetic) {
  return kinetic * (kinetic + 2.0 * kProtonMass) / (kinetic + kProtonMass);
}

struct ParticleState {
  Vec3 position = Vec3::Zero();
  Vec3 direction = Vec3(1.0, 0.0, 0.0);
  double energy = 0.0;
};

/// Per-voxel accumulators over histories. Squared deposits are per-history
/// voxel totals, so the sample variance of the dose estimator is available.
struct DoseTally {
  std::vector<double> energy;
  std::vector<double> energy_sq;
  std::vector<std::uint32_t> hits;
  std::uint64_t histories = 0;

  DoseTally() = default;
  explicit DoseTally(std::size_t voxels) : energy(voxels, 0.0), energy_sq(voxels, 0.0), hits(voxels, 0) {}

  std::size_t size() const noexcept { return energy.size(); }

  void merge(const DoseTally& other) {
    if (other.size() != size()) throw ShapeError("tally sizes differ");
    for (std::size_t i = 0; i < size(); ++i) {
      energy[i] += other.energy[i];
      energy_sq[i] += other.energy_sq[i];
      hits[i] += other.hits[i];
    }
    histories += other.histories;
  }
};

enum class Termination { Stopped, Exited, StepLimit };

struct HistoryResult {
  long double initial_energy = 0.0L;
  long double deposited = 0.0L;
  long double exit_energy = 0.0L;  // kinetic energy carried out of the grid or left at the step limit
  std::size_t steps = 0;
  Termination termination = Termination::Stopped;
  ParticleState final_state;
};

namespace detail {

inline void orthonormal_basis(const Vec3& d, Vec3& u, Vec3& v) {
  const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3(1.0, 0.0, 0.0) : Vec3(0.0, 1.0, 0.0);
  u = d.cross(helper).normalized();
  v = d.cross(u);
}

/// Rotates `d` by projected angles (a, b) about two axes perpendicular to it.
inline Vec3 deflect(const Vec3& d, double a, double b) {
  const double theta = std::hypot(a, b);
  if (theta == 0.0) return d;
  Vec3 u, v;
  orthonormal_basis(d, u, v);
  const Vec3 perp = (a * u + b * v) / theta;
  return (std::cos(theta) * d + std::sin(theta) * perp).normalized();
}

/// Per-history deposit list merged into the tally at the end of the history.
class HistoryDeposits {
 public:
  void add(std::size_t voxel, double e) {
    if (e == 0.0) return;
    if (!items_.empty() && items_.back().first == voxel) {
      items_.back().second += e;
    } else {
      items_.emplace_back(voxel, e);
    }
  }

  void flush(DoseTally& tally) {
    std::sort(items_.begin(), items_.end(),
              [](const auto& l, const auto& r) { return l.first < r.first; });
    std::size_t i = 0;
    while (i < items_.size()) {
      const std::size_t voxel = items_[i].first;
      double sum = 0.0;
      for (; i < items_.size() && items_[i].first == voxel; ++i) sum += items_[i].second;
      tally.energy[voxel] += sum;
      tally.energy_sq[voxel] += sum * sum;
      tally.hits[voxel] += 1;
    }
    items_.clear();
    tally.histories += 1;
  }

 private:
  std::vector<std::pair<std::size_t, double>> items_;
};

}  // namespace detail

/// Samples the initial particle state from the beam description.
inline ParticleState sample_source(const BeamSpec& beam, const TransportConfig& cfg, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 u, v;
  detail::orthonormal_basis(beam.direction, u, v);
  ParticleState s;
  const double su = gauss(rng), sv = gauss(rng);
  s.position = beam.entry + beam.spatial_sigma * (su * u + sv * v);
  const double au = gauss(rng), av = gauss(rng);
  s.direction = detail::deflect(beam.direction, beam.angular_sigma * au, beam.angular_sigma * av);
  const double ez = gauss(rng);
  s.energy = std::max(beam.energy_mean + beam.energy_sigma * ez, cfg.e_min);
  return s;
}

/// Transports one proton from `state` and adds its deposits to `tally`.
inline HistoryResult transport_particle(const Phantom& phantom, ParticleState state, const TransportConfig& cfg,
                                        DoseTally& tally, Rng& rng) {
  const auto& grid = phantom.grid();
  if (tally.size() != grid.voxel_count()) throw ShapeError("tally does not match phantom grid");
  std::normal_distribution<double> gauss(0.0, 1.0);
  detail::HistoryDeposits deposits;

  HistoryResult result;
  result.initial_energy = state.energy;
  const double inv_p = 1.0 / cfg.water_p;
  const double ds = cfg.step_length;
  double E = state.energy;
  std::size_t last_voxel = 0;
  bool have_voxel = grid.try_voxel_at(state.position, last_voxel);

  auto finish = [&](Termination why, double carried) {
    result.termination = why;
    result.exit_energy = carried;
    state.energy = carried;
    result.final_state = state;
    deposits.flush(tally);
    return result;
  };

  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    if (E <= cfg.e_min) {
      if (have_voxel) {
        deposits.add(last_voxel, E);
        result.deposited += E;
        return finish(Termination::Stopped, 0.0);
      }
      return finish(Termination::Exited, E);
    }
    std::size_t voxel = 0;
    const Vec3 nominal_mid = state.position + 0.5 * ds * state.direction;
    if (!grid.try_voxel_at(nominal_mid, voxel)) return finish(Termination::Exited, E);
    const Material& mat = phantom.voxel_material(voxel);
    const double rho_rel = mat.density / kWaterDensity;
    const double factor = mat.relative_stopping * rho_rel;

    // Exact CSDA loss over the step: residual range shrinks by factor * ds.
    const double residual = cfg.water_alpha * std::pow(E, cfg.water_p);
    const double residual_end = residual - factor * ds;
    double length = ds;
    double loss_det = 0.0;
    if (residual_end > 0.0) {
      loss_det = E - std::pow(residual_end / cfg.water_alpha, inv_p);
    } else {
      loss_det = E;
      length = residual / factor;
      std::size_t v2 = voxel;
      if (grid.try_voxel_at(state.position + 0.5 * length * state.direction, v2)) voxel = v2;
    }
    double loss = loss_det;
    if (cfg.straggling && cfg.straggling_coefficient > 0.0)
      loss += std::sqrt(cfg.straggling_coefficient * rho_rel * length) * gauss(rng);
    loss = std::clamp(loss, 0.0, E);

    const double e_before = E;
    E -= loss;
    deposits.add(voxel, loss);
    result.deposited += loss;
    last_voxel = voxel;
    have_voxel = true;
    state.position += length * state.direction;
    result.steps = step + 1;

    if (E <= cfg.e_min) {
      deposits.add(voxel, E);
      result.deposited += E;
      E = 0.0;
      return finish(Termination::Stopped, 0.0);
    }
    if (cfg.scattering) {
      const double theta0 = cfg.highland_constant / proton_pv(e_before) * std::sqrt(length / mat.radiation_length);
      const double a = theta0 * gauss(rng);
      const double b = theta0 * gauss(rng);
      state.direction = detail::deflect(state.direction, a, b);
    }
    if (!grid.contains(state.position)) return finish(Termination::Exited, E);
  }
  return finish(Termination::StepLimit, E);
}

inline HistoryResult simulate_history(const Phantom& phantom, const BeamSpec& beam, const TransportConfig& cfg,
                                      DoseTally& tally, std::uint64_t seed) {
  beam.validate();
  cfg.validate();
  auto rng = make_rng(seed);
  const ParticleState start = sample_source(beam, cfg, rng);
  return transport_particle(phantom, start, cfg, tally, rng);
}

/// Seed of history `n` within an estimate seeded by `seed`.
inline std::uint64_t history_seed(std::uint64_t seed, std::uint64_t n) { return split_seed(seed, n); }

/// Dose on a voxel grid, MeV/g per history, or log10 thereof.
struct DoseField {
  VoxelGrid grid;
  std::vector<double> values;
  bool log_scale = false;

  double at(std::size_t i, std::size_t j = 0, std::size_t k = 0) const { return values.at(grid.linear_index(i, j, k)); }
};

struct DoseEstimate {
  DoseField dose;
  std::vector<double> variance;  // per-voxel variance of the dose estimator
  std::vector<std::uint32_t> hits;  // histories depositing in each voxel
  std::uint64_t histories = 0;
};

inline DoseEstimate finalise_tally(const Phantom& phantom, const DoseTally& tally) {
  const auto& grid = phantom.grid();
  const double n = static_cast<double>(tally.histories);
  DoseEstimate out;
  out.dose.grid = grid;
  out.dose.values.assign(grid.voxel_count(), 0.0);
  out.variance.assign(grid.voxel_count(), 0.0);
  out.hits = tally.hits;
  out.histories = tally.histories;
  if (tally.histories == 0) return out;
  const double volume = grid.voxel_volume();
  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    const double mass = phantom.voxel_material(v).density * volume;
    out.dose.values[v] = tally.energy[v] / n / mass;
    if (tally.histories > 1) {
      const double mean = tally.energy[v] / n;
      const double ss = std::max(tally.energy_sq[v] - n * mean * mean, 0.0);
      out.variance[v] = ss / (n - 1.0) / n / (mass * mass);
    }
  }
  return out;
}

/// Mean dose over N independent histories.
inline DoseEstimate estimate_dose(const Phantom& phantom, const BeamSpec& beam, std::size_t histories,
                                  const TransportConfig& cfg, std::uint64_t seed) {
  if (histories < 1) throw PreconditionError("estimate_dose: N must be >= 1");
  beam.validate();
  cfg.validate();
  const std::size_t voxels = phantom.grid().voxel_count();
  constexpr std::size_t kMaxChunks = 64;
  const std::size_t chunks = std::min(histories, kMaxChunks);
  auto chunk_begin = [&](std::size_t c) { return c * histories / chunks; };

  auto run_chunk = [&](std::size_t c, DoseTally& tally) {
    for (std::size_t n = chunk_begin(c); n < chunk_begin(c + 1); ++n) {
      auto rng = make_rng(history_seed(seed, n));
      const ParticleState start = sample_source(beam, cfg, rng);
      transport_particle(phantom, start, cfg, tally, rng);
    }
  };

  unsigned workers = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, chunks));

  DoseTally total(voxels);
  if (workers <= 1) {
    if (cfg.deterministic) {
      DoseTally chunk_tally(voxels);
      for (std::size_t c = 0; c < chunks; ++c) {
        chunk_tally = DoseTally(voxels);
        run_chunk(c, chunk_tally);
        total.merge(chunk_tally);
      }
    } else {
      for (std::size_t c = 0; c < chunks; ++c) run_chunk(c, total);
    }
    return finalise_tally(phantom, total);
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  if (cfg.deterministic) {
    // Completed chunks are merged strictly in chunk order.
    std::mutex mu;
    std::map<std::size_t, DoseTally> pending;
    std::size_t next_merge = 0;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < chunks; c = next++) {
          DoseTally local(voxels);
          run_chunk(c, local);
          std::lock_guard lock(mu);
          pending.emplace(c, std::move(local));
          while (!pending.empty() && pending.begin()->first == next_merge) {
            total.merge(pending.begin()->second);
            pending.erase(pending.begin());
            ++next_merge;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  } else {
    std::vector<DoseTally> locals(workers, DoseTally(voxels));
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = next++; c < chunks; c = next++) run_chunk(c, locals[w]);
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& l : locals) total.merge(l);
  }
  return finalise_tally(phantom, total);
}

/// Pointwise log10(dose + shift).
inline DoseField log_dose(const DoseField& field, double shift = 1e-10) {
  if (!(shift > 0.0)) throw ConfigError("log shift must be positive");
  if (field.log_scale) throw PreconditionError("field is already log-scaled");
  DoseField out{field.grid, field.values, true};
  for (double& v : out.values) v = std::log10(v + shift);
  return out;
}

/// Sums a linear dose field along `axis` and returns log10(sum + shift) on the
/// grid of the remaining axes.
inline DoseField project_log_dose(const DoseField& field, std::size_t axis = 2, double shift = 1e-10) {
  if (!(shift > 0.0)) throw ConfigError("log shift must be positive");
  if (field.log_scale) throw PreconditionError("projection requires a linear dose field");
  if (axis > 2) throw PreconditionError("projection axis must be 0, 1 or 2");
  const auto& g = field.grid;
  std::vector<VoxelGrid::Axis> axes;
  for (std::size_t a = 0; a < 3; ++a)
    if (a != axis) axes.push_back({g.dim(a), g.lower(a), g.upper(a)});
  DoseField out{VoxelGrid(axes), {}, true};
  out.values.assign(out.grid.voxel_count(), 0.0);
  for (std::size_t v = 0; v < g.voxel_count(); ++v) {
    const auto ijk = g.unravel(v);
    std::size_t rest[2];
    std::size_t r = 0;
    for (std::size_t a = 0; a < 3; ++a)
      if (a != axis) rest[r++] = ijk[a];
    const std::size_t o = out.grid.linear_index(rest[0], rest[1]);
    out.values[o] += field.values[v];
  }
  for (double& v : out.values) v = std::log10(v + shift);
  return out;
}

/// Integrated dose per slice along `axis` of a linear field.
inline std::vector<double> axis_profile(const DoseField& field, std::size_t axis = 0) {
  std::vector<double> profile(field.grid.dim(axis), 0.0);
  for (std::size_t v = 0; v < field.grid.voxel_count(); ++v) profile[field.grid.unravel(v)[axis]] += field.values[v];
  return profile;
}

/// Writes a 2-D field (first two axes, k = 0) as a CSV matrix: one row per j.
inline void write_csv_matrix(std::ostream& os, const DoseField& field) {
  os.precision(9);
  const auto& g = field.grid;
  for (std::size_t j = 0; j < g.dim(1); ++j) {
    for (std::size_t i = 0; i < g.dim(0); ++i) {
      if (i) os << ',';
      os << field.at(i, j, 0);
    }
    os << '\n';
  }
}

}  // namespace pdose::transport
