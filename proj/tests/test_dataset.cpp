#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "pdose/dataset.hpp"

using namespace pdose;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pdose_test_dataset" / name;
  fs::remove_all(dir);
  return dir;
}

Generator2D small_2d() {
  Generator2D g;
  g.grid = VoxelGrid({{150, -7.5, 7.5}, {20, -5.0, 5.0}, {1, -5.0, 5.0}});
  g.histories = 2000;
  return g;
}

Generator3D small_3d() {
  Generator3D g;
  g.grid = VoxelGrid({{20, -20.0, 20.0}, {20, -20.0, 20.0}, {20, -20.0, 20.0}});
  g.histories = 500;
  return g;
}

std::size_t peak_index(const transport::DoseField& f) {
  const auto prof = transport::axis_profile(f, 0);
  return static_cast<std::size_t>(std::max_element(prof.begin(), prof.end()) - prof.begin());
}

double centroid(const transport::DoseField& f, std::size_t axis) {
  double s = 0.0, w = 0.0;
  for (std::size_t v = 0; v < f.values.size(); ++v) {
    s += f.values[v] * f.grid.centre(axis, f.grid.unravel(v)[axis]);
    w += f.values[v];
  }
  return s / w;
}

}  // namespace

TEST(Generate1D, PointMassGivesMeanCurve) {
  Generator1D g;
  g.dist = g.dist.point_mass();
  const auto ds = generate_1d(1, g, 3);
  const auto c = analytic::depth_dose_spectrum({0.00246, 1.75, 1.0, 130.0}, analytic::DepthGrid(20.0, 400), 3.0, 64);
  ASSERT_EQ(ds.output_dim(), 400u);
  for (std::size_t k = 0; k < 400; ++k) EXPECT_EQ(ds.targets(0, static_cast<Eigen::Index>(k)), static_cast<float>(c.dose[k]));
  EXPECT_EQ((*ds.range_targets)[0], static_cast<float>(analytic::distal_edge(c)));
}

TEST(Generate1D, EdgesWithinRangeBracket) {
  Generator1D g;
  const auto ds = generate_1d(1000, g, 11);
  const auto& m = g.dist.mean;
  const auto& s = g.dist.sigma;
  const double lo = 0.9 * analytic::csda_range({m[0] - 4 * s[0], m[1] - 4 * s[1], 1.0, 0}, m[3] - 4 * s[3]);
  const double hi = 1.1 * analytic::csda_range({m[0] + 4 * s[0], m[1] + 4 * s[1], 1.0, 0}, m[3] + 4 * s[3]);
  for (float e : *ds.range_targets) {
    EXPECT_GE(e, lo);
    EXPECT_LE(e, hi);
  }
  EXPECT_GE(ds.targets.minCoeff(), 0.0f);
}

TEST(Generate1D, Deterministic) {
  const auto a = generate_1d(20, Generator1D{}, 4);
  const auto b = generate_1d(20, Generator1D{}, 4);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_NE(generate_1d(20, Generator1D{}, 5).inputs, a.inputs);
}

TEST(Generate1D, PrefixesAreNested) {
  const auto a = generate_1d(10, Generator1D{}, 4);
  const auto b = generate_1d(25, Generator1D{}, 4);
  EXPECT_EQ(a.targets, b.targets.topRows(10));
}

TEST(Generate1D, SpectrumErrorCarriesSampleIndex) {
  Generator1D g;
  g.spectrum_variance = 1e6;
  try {
    generate_1d(3, g, 1);
    FAIL();
  } catch (const SpectrumError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 0"), std::string::npos);
  }
}

TEST(Split, ExactSizesDisjointExhaustive) {
  const auto s = make_split(100, {0.8, 0.1, 0.1}, 3);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.calibration.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.calibration.begin(), s.calibration.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(*all.rbegin(), 99u);
  const auto again = make_split(100, {0.8, 0.1, 0.1}, 3);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);
  EXPECT_NE(make_split(100, {0.8, 0.1, 0.1}, 4).train, s.train);
}

TEST(Split, OddSizesStillExhaustive) {
  for (std::size_t n : {1, 7, 33}) {
    const auto s = make_split(n, {0.5, 0.25, 0.25}, 1);
    EXPECT_EQ(s.train.size() + s.calibration.size() + s.test.size(), n);
  }
  EXPECT_THROW(make_split(10, {0.5, 0.5, 0.5}, 1), PreconditionError);
  EXPECT_THROW(make_split(10, {1.5, -0.5, 0.0}, 1), PreconditionError);
}

TEST(Split, EmptyPartRejectedByConsumer) {
  const auto s = make_split(10, {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(s.train.size(), 10u);
  EXPECT_THROW(s.require(SplitPart::Calibration), PreconditionError);
  EXPECT_NO_THROW(s.require(SplitPart::Train));
}

TEST(Persistence, RoundtripBitEquality) {
  auto ds = generate_1d(12, Generator1D{}, 8);
  split(ds, {0.5, 0.25, 0.25}, 2);
  const auto dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.inputs, ds.inputs);
  EXPECT_EQ(back.targets, ds.targets);
  EXPECT_EQ(*back.range_targets, *ds.range_targets);
  EXPECT_EQ(back.split.train, ds.split.train);
  EXPECT_EQ(back.split.test, ds.split.test);
  EXPECT_EQ(back.experiment, "e1");
  EXPECT_EQ(back.output_dims, ds.output_dims);
  EXPECT_EQ(back.provenance.size(), 12u);
  EXPECT_EQ(back.provenance[5].seed, ds.provenance[5].seed);
}

TEST(Persistence, ManifestOnlyInspection) {
  const auto ds = generate_1d(4, Generator1D{}, 8);
  const auto dir = temp_dir("manifest");
  save_dataset(ds, dir);
  fs::remove(dir / "arrays.bin");
  const auto m = load_manifest(dir);
  EXPECT_EQ(m.at("sample_count").get<std::size_t>(), 4u);
  EXPECT_EQ(m.at("input_dim").get<std::size_t>(), 4u);
  EXPECT_EQ(m.at("tensors").size(), 3u);
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Persistence, VersionBumpRejected) {
  const auto dir = temp_dir("version");
  save_dataset(generate_1d(2, Generator1D{}, 1), dir);
  auto m = load_manifest(dir);
  m["format_version"] = kDatasetFormatVersion + 1;
  std::ofstream(dir / "manifest.json") << m.dump();
  EXPECT_THROW(load_manifest(dir), FormatError);
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Persistence, ChecksumMismatchRejected) {
  const auto dir = temp_dir("checksum");
  save_dataset(generate_1d(2, Generator1D{}, 1), dir);
  {
    std::fstream f(dir / "arrays.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Persistence, ShapeMismatchRejected) {
  const auto dir = temp_dir("shape");
  save_dataset(generate_1d(2, Generator1D{}, 1), dir);
  auto m = load_manifest(dir);
  m["sample_count"] = 3;
  std::ofstream(dir / "manifest.json") << m.dump();
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Persistence, ArraysAreLittleEndianFloat32) {
  const auto ds = generate_1d(1, Generator1D{}, 1);
  const auto dir = temp_dir("layout");
  save_dataset(ds, dir);
  std::ifstream f(dir / "arrays.bin", std::ios::binary);
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  EXPECT_EQ(v, ds.inputs(0, 0));
  EXPECT_EQ(fs::file_size(dir / "arrays.bin"), 4u * (4 + 400 + 1));
}

TEST(Provenance, SeedRegeneratesSample1D) {
  const auto ds = generate_1d(6, Generator1D{}, 21);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto [x, target] = regenerate_sample(ds, i);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(static_cast<float>(x[k]), ds.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < target.size(); ++k) EXPECT_EQ(target[k], ds.targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
  }
}

TEST(Provenance, SeedRegeneratesSample2DAfterReload) {
  auto g = small_2d();
  g.histories = 100;
  const auto ds = generate_2d(3, g, 5);
  const auto dir = temp_dir("regen2d");
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  const auto [x, target] = regenerate_sample(back, 2);
  for (std::size_t k = 0; k < target.size(); ++k) ASSERT_EQ(target[k], back.targets(2, static_cast<Eigen::Index>(k)));
  EXPECT_EQ(static_cast<float>(x[1]), back.inputs(2, 1));
}

TEST(Generate2D, BoneShiftsPeakProximally) {
  const auto g = small_2d();
  auto gw = g;
  gw.slab = water();
  const auto bone_run = simulate_sample(g, {0.0, 0.0}, 3);
  const auto water_run = simulate_sample(gw, {0.0, 0.0}, 3);
  // The beam travels toward -x, so a proximal peak sits at larger x.
  EXPECT_GT(peak_index(bone_run.dose), peak_index(water_run.dose));
}

TEST(Generate2D, ZeroBeamPerturbationMatchesTwoComponentInput) {
  const auto g = small_2d();
  const auto a = simulate_sample(g, {0.0, 0.0}, 7);
  const auto b = simulate_sample(g, {0.0, 0.0, 0.0, 0.0}, 7);
  EXPECT_EQ(a.dose.values, b.dose.values);
}

TEST(Generate2D, LogTargetsFloorAtMinusTen) {
  auto g = small_2d();
  g.histories = 200;
  const auto ds = generate_2d(2, g, 1);
  EXPECT_TRUE(ds.log_targets);
  EXPECT_EQ(ds.output_dims, (std::vector<std::size_t>{150, 20}));
  EXPECT_GE(ds.targets.minCoeff(), -10.0f);
  EXPECT_EQ(ds.targets(0, 0), -10.0f);
  EXPECT_EQ(ds.targets(0, 150 * 20 - 150), -10.0f);
}

TEST(Generate3D, CentredBeamCentroidAtOrigin) {
  const auto g = small_3d();
  std::vector<double> cx;
  for (std::uint64_t r = 0; r < 8; ++r) cx.push_back(centroid(simulate_sample(g, {0.0, 0.0}, r).dose, 0));
  double m = 0, v = 0;
  for (double c : cx) m += c / cx.size();
  for (double c : cx) v += (c - m) * (c - m) / (cx.size() - 1);
  EXPECT_LT(std::abs(m), 2.0 * std::sqrt(v / cx.size()) + 1e-3);
}

TEST(Generate3D, ShiftedBeamTranslatesCentroid) {
  const auto g = small_3d();
  const auto f = simulate_sample(g, {3.0, 0.0}, 1).dose;
  EXPECT_NEAR(centroid(f, 0), 3.0, g.spatial_sigma);
  EXPECT_NEAR(centroid(f, 1), 0.0, g.spatial_sigma);
}

TEST(Generate3D, SingleHistoryIsLegal) {
  auto g = small_3d();
  g.histories = 1;
  const auto ds = generate_3d(2, g, 1);
  EXPECT_EQ(ds.output_dims, (std::vector<std::size_t>{20, 20, 20}));
  EXPECT_GE(ds.targets.minCoeff(), -10.0f);
  EXPECT_GT(ds.targets.maxCoeff(), -10.0f);
}

TEST(GeneratorJson, Roundtrip) {
  const auto g = small_2d();
  const auto back = Generator2D::from_json(g.to_json());
  EXPECT_TRUE(back.grid == g.grid);
  EXPECT_EQ(back.histories, g.histories);
  EXPECT_EQ(back.to_json(), g.to_json());
  const auto g3 = small_3d();
  EXPECT_EQ(Generator3D::from_json(g3.to_json()).to_json(), g3.to_json());
  EXPECT_EQ(Generator1D::from_json(Generator1D{}.to_json()).to_json(), Generator1D{}.to_json());
}
