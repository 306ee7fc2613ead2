#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "pdose/transport.hpp"

using namespace pdose;
using namespace pdose::transport;

namespace {

VoxelGrid line_grid(double length = 30.0, std::size_t n = 600) { return VoxelGrid({{n, 0.0, length}, {1, -5, 5}, {1, -5, 5}}); }

BeamSpec pencil(double energy) {
  BeamSpec b;
  b.entry = Vec3(0.0, 0.0, 0.0);
  b.direction = Vec3(1.0, 0.0, 0.0);
  b.energy_mean = energy;
  return b;
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TEST(StoppingPower, InverseFunctionIdentity) {
  const TransportConfig cfg;
  const double drde = cfg.water_alpha * cfg.water_p * std::pow(130.0, cfg.water_p - 1.0);
  EXPECT_NEAR(water_stopping_power(130.0, cfg) * drde, 1.0, 1e-6);
}

TEST(StoppingPower, QuadratureReproducesRange) {
  TransportConfig cfg;
  cfg.e_min = 1e-9;
  for (double e : {50.0, 130.0, 200.0}) {
    // Simpson on u = E^(1/4) removes the endpoint singularity of dz/dE.
    const int n = 2000;
    const double umax = std::pow(e, 0.25);
    auto f = [&](double u) {
      const double en = std::max(u * u * u * u, cfg.e_min);
      return 4.0 * u * u * u / water_stopping_power(en, cfg);
    };
    const double h = umax / n;
    double acc = f(1e-9) + f(umax);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(i * h);
    const double r = acc * h / 3.0;
    const double exact = analytic::csda_range(cfg.water_params(e), e);
    EXPECT_NEAR(r, exact, 1e-3 * exact);
  }
}

TEST(StoppingPower, LargestJustAboveCutoff) {
  const TransportConfig cfg;
  const double top = water_stopping_power(cfg.e_min * (1 + 1e-12), cfg);
  EXPECT_TRUE(std::isfinite(top));
  for (double e = 2.0; e < 250.0; e *= 1.3) EXPECT_LT(water_stopping_power(e, cfg), top);
  EXPECT_THROW(water_stopping_power(0.5, cfg), DomainError);
}

TEST(History, ConservesEnergy) {
  const auto ph = build_slab_phantom(0.0, 0.0, VoxelGrid({{300, -7.5, 7.5}, {40, -5, 5}, {1, -5, 5}}));
  BeamSpec beam;
  beam.entry = Vec3(7.5, 0.0, 0.0);
  beam.direction = Vec3(-1.0, 0.0, 0.0);
  beam.energy_mean = 150.0;
  beam.energy_sigma = 1.0;
  const TransportConfig cfg;
  for (std::uint64_t s = 0; s < 40; ++s) {
    DoseTally t(ph.grid().voxel_count());
    const auto r = simulate_history(ph, beam, cfg, t, s);
    const long double tallied = std::accumulate(t.energy.begin(), t.energy.end(), 0.0L);
    EXPECT_NEAR(static_cast<double>((r.deposited + r.exit_energy) / r.initial_energy), 1.0, 1e-9);
    EXPECT_NEAR(static_cast<double>(tallied / r.deposited), 1.0, 1e-9);
    EXPECT_LE(static_cast<double>(r.deposited), static_cast<double>(r.initial_energy) * (1 + 1e-12));
  }
}

TEST(History, CsdaStoppingDepthMatchesRange) {
  TransportConfig cfg;
  cfg.straggling = false;
  cfg.scattering = false;
  const auto ph = build_homogeneous_phantom(water(), line_grid());
  for (double e : {70.0, 150.0, 200.0}) {
    DoseTally t(ph.grid().voxel_count());
    const auto r = simulate_history(ph, pencil(e), cfg, t, 1);
    EXPECT_EQ(r.termination, Termination::Stopped);
    EXPECT_NEAR(r.final_state.position.x(), analytic::csda_range(cfg.water_params(e), e), cfg.step_length);
  }
}

TEST(History, OutwardBeamDepositsNothing) {
  const auto ph = build_homogeneous_phantom(water(), line_grid());
  BeamSpec b = pencil(150.0);
  b.entry = Vec3(30.0, 0.0, 0.0);
  DoseTally t(ph.grid().voxel_count());
  const auto r = simulate_history(ph, b, TransportConfig{}, t, 1);
  EXPECT_EQ(r.termination, Termination::Exited);
  EXPECT_EQ(r.steps, 0u);
  for (double e : t.energy) EXPECT_EQ(e, 0.0);
}

TEST(History, RejectsBadInputs) {
  const auto ph = build_homogeneous_phantom(water(), line_grid());
  BeamSpec b = pencil(150.0);
  b.direction = Vec3(1.0, 0.1, 0.0);
  DoseTally t(ph.grid().voxel_count());
  EXPECT_THROW(simulate_history(ph, b, TransportConfig{}, t, 1), ConfigError);
  TransportConfig bad;
  bad.step_length = 0.0;
  EXPECT_THROW(simulate_history(ph, pencil(150.0), bad, t, 1), ConfigError);
}

TEST(History, StepLimitBoundsHistory) {
  TransportConfig cfg;
  cfg.max_steps = 10;
  const auto ph = build_homogeneous_phantom(water(), line_grid());
  DoseTally t(ph.grid().voxel_count());
  const auto r = simulate_history(ph, pencil(150.0), cfg, t, 1);
  EXPECT_EQ(r.termination, Termination::StepLimit);
  EXPECT_EQ(r.steps, 10u);
  EXPECT_NEAR(static_cast<double>((r.deposited + r.exit_energy) / r.initial_energy), 1.0, 1e-9);
}

TEST(Estimate, SingleHistoryEqualsNormalisedDeposits) {
  const auto ph = build_homogeneous_phantom(water(), line_grid());
  const TransportConfig cfg;
  const auto est = estimate_dose(ph, pencil(150.0), 1, cfg, 9);
  DoseTally t(ph.grid().voxel_count());
  simulate_history(ph, pencil(150.0), cfg, t, history_seed(9, 0));
  const double mass = ph.grid().voxel_volume();
  for (std::size_t v = 0; v < t.size(); ++v) EXPECT_DOUBLE_EQ(est.dose.values[v], t.energy[v] / mass);
  EXPECT_THROW(estimate_dose(ph, pencil(150.0), 0, cfg, 9), PreconditionError);
}

TEST(Estimate, SeedDeterminismAcrossThreadCounts) {
  const auto ph = build_slab_phantom(0.0, 0.0, VoxelGrid({{150, -7.5, 7.5}, {20, -5, 5}, {1, -5, 5}}));
  BeamSpec b;
  b.entry = Vec3(7.5, 0.0, 0.0);
  b.direction = Vec3(-1.0, 0.0, 0.0);
  TransportConfig one;
  one.threads = 1;
  TransportConfig four = one;
  four.threads = 4;
  const auto a = estimate_dose(ph, b, 500, one, 3);
  const auto c = estimate_dose(ph, b, 500, one, 3);
  const auto d = estimate_dose(ph, b, 500, four, 3);
  EXPECT_EQ(a.dose.values, c.dose.values);
  EXPECT_EQ(a.dose.values, d.dose.values);
  EXPECT_EQ(a.variance, d.variance);
  const auto e = estimate_dose(ph, b, 500, one, 4);
  EXPECT_NE(a.dose.values, e.dose.values);
}

TEST(Estimate, NondeterministicModeAgreesUpToRounding) {
  const auto ph = build_homogeneous_phantom(water(), line_grid(20.0, 100));
  TransportConfig fast;
  fast.deterministic = false;
  fast.threads = 3;
  const auto a = estimate_dose(ph, pencil(120.0), 300, fast, 5);
  const auto b = estimate_dose(ph, pencil(120.0), 300, TransportConfig{}, 5);
  for (std::size_t v = 0; v < a.dose.values.size(); ++v)
    EXPECT_NEAR(a.dose.values[v], b.dose.values[v], 1e-9 * (1.0 + std::abs(b.dose.values[v])));
}

TEST(Estimate, VarianceHalvesWhenHistoriesDouble) {
  const auto ph = build_homogeneous_phantom(water(), VoxelGrid({{100, 0, 20}, {10, -2, 2}, {1, -5, 5}}));
  TransportConfig cfg;
  const auto a = estimate_dose(ph, pencil(150.0), 2000, cfg, 21);
  const auto b = estimate_dose(ph, pencil(150.0), 4000, cfg, 22);
  double ratio = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < a.variance.size(); ++v)
    if (a.hits[v] >= 100 && b.hits[v] >= 100 && b.variance[v] > 0.0) {
      ratio += a.variance[v] / b.variance[v];
      ++n;
    }
  ASSERT_GT(n, 50u);
  EXPECT_NEAR(ratio / n, 2.0, 0.4);
}

TEST(Estimate, PeakDepthNearAnalyticRange) {
  const auto ph = build_homogeneous_phantom(water(), VoxelGrid({{400, 0, 20}, {20, -5, 5}, {1, -5, 5}}));
  const TransportConfig cfg;
  const auto est = estimate_dose(ph, pencil(150.0), 3000, cfg, 2);
  const auto prof = axis_profile(est.dose, 0);
  const double peak = est.dose.grid.centre(0, argmax(prof));
  const double range = analytic::csda_range(cfg.water_params(150.0), 150.0);
  EXPECT_NEAR(peak, range, 2.0 * range_straggling_sigma(150.0, cfg) + est.dose.grid.voxel_size(0));
}

TEST(Estimate, BoneShortensRange) {
  const VoxelGrid g({{400, 0, 20}, {20, -5, 5}, {1, -5, 5}});
  const TransportConfig cfg;
  const auto w = estimate_dose(build_homogeneous_phantom(water(), g), pencil(150.0), 1000, cfg, 2);
  const auto b = estimate_dose(build_homogeneous_phantom(bone(), g), pencil(150.0), 1000, cfg, 2);
  EXPECT_LT(argmax(axis_profile(b.dose, 0)), argmax(axis_profile(w.dose, 0)));
}

TEST(Projection, AllZeroIsFloor) {
  DoseField f{VoxelGrid({{4, 0, 1}, {3, 0, 1}, {2, 0, 1}}), std::vector<double>(24, 0.0), false};
  const auto p = project_log_dose(f);
  ASSERT_EQ(p.values.size(), 12u);
  EXPECT_TRUE(p.log_scale);
  for (double v : p.values) EXPECT_EQ(v, -10.0);
}

TEST(Projection, UnitDoseAndRoundtrip) {
  DoseField f{VoxelGrid({{3, 0, 1}, {2, 0, 1}, {4, 0, 1}}), std::vector<double>(24, 0.0), false};
  f.values[f.grid.linear_index(1, 1, 0)] = 0.25;
  f.values[f.grid.linear_index(1, 1, 3)] = 0.75;
  for (std::size_t k = 0; k < 4; ++k) f.values[f.grid.linear_index(2, 0, k)] = 3.5e3 * (k + 1);
  const auto p = project_log_dose(f, 2);
  EXPECT_NEAR(p.at(1, 1), std::log10(1.0 + 1e-10), 1e-15);
  const double sum = 3.5e3 * 10;
  EXPECT_NEAR(std::pow(10.0, p.at(2, 0)), sum, 1e-9 * sum);
  EXPECT_THROW(project_log_dose(f, 2, 0.0), ConfigError);
  EXPECT_THROW(project_log_dose(p, 1), PreconditionError);
}

TEST(Projection, OtherAxesKeepRemainingOrder) {
  DoseField f{VoxelGrid({{2, 0, 1}, {3, 0, 1}, {4, 0, 1}}), std::vector<double>(24, 0.0), false};
  f.values[f.grid.linear_index(1, 2, 3)] = 1.0;
  const auto p = project_log_dose(f, 0);
  EXPECT_EQ(p.grid.dim(0), 3u);
  EXPECT_EQ(p.grid.dim(1), 4u);
  EXPECT_NEAR(p.at(2, 3), 0.0, 1e-9);
}
