#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <zlib.h>

#include "pdose/analytic1d.hpp"
#include "pdose/checkpoint.hpp"
#include "pdose/error.hpp"
#include "pdose/phantom.hpp"
#include "pdose/random.hpp"
#include "pdose/train.hpp"
#include "pdose/transport.hpp"
#include "pdose/uq.hpp"

namespace pdose {

using json = nlohmann::json;

// ---- JSON conversions for configuration types -----------------------------

inline void to_json(json& j, const InputDistribution& d) { j = json{{"mean", d.mean}, {"sigma", d.sigma}, {"tags", d.tags}}; }
inline void from_json(const json& j, InputDistribution& d) {
  j.at("mean").get_to(d.mean);
  j.at("sigma").get_to(d.sigma);
  d.tags = j.value("tags", std::vector<std::string>{});
}

inline void to_json(json& j, const Material& m) {
  j = json{{"name", m.name}, {"density", m.density}, {"relative_stopping", m.relative_stopping},
           {"radiation_length", m.radiation_length}};
}
inline void from_json(const json& j, Material& m) {
  m.name = j.value("name", std::string("material"));
  j.at("density").get_to(m.density);
  j.at("relative_stopping").get_to(m.relative_stopping);
  j.at("radiation_length").get_to(m.radiation_length);
}

inline json grid_to_json(const VoxelGrid& g) {
  json axes = json::array();
  for (std::size_t a = 0; a < g.rank(); ++a) axes.push_back({{"count", g.dim(a)}, {"lower", g.lower(a)}, {"upper", g.upper(a)}});
  return axes;
}
inline VoxelGrid grid_from_json(const json& j) {
  std::vector<VoxelGrid::Axis> axes;
  for (const auto& a : j) axes.push_back({a.at("count").get<std::size_t>(), a.at("lower").get<double>(), a.at("upper").get<double>()});
  return VoxelGrid(axes);
}

namespace transport {
inline void to_json(json& j, const TransportConfig& c) {
  j = json{{"step_length", c.step_length}, {"e_min", c.e_min}, {"straggling_coefficient", c.straggling_coefficient},
           {"highland_constant", c.highland_constant}, {"max_steps", c.max_steps}, {"straggling", c.straggling},
           {"scattering", c.scattering}, {"water_alpha", c.water_alpha}, {"water_p", c.water_p},
           {"threads", c.threads}, {"deterministic", c.deterministic}};
}
inline void from_json(const json& j, TransportConfig& c) {
  TransportConfig d;
  c.step_length = j.value("step_length", d.step_length);
  c.e_min = j.value("e_min", d.e_min);
  c.straggling_coefficient = j.value("straggling_coefficient", d.straggling_coefficient);
  c.highland_constant = j.value("highland_constant", d.highland_constant);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.straggling = j.value("straggling", d.straggling);
  c.scattering = j.value("scattering", d.scattering);
  c.water_alpha = j.value("water_alpha", d.water_alpha);
  c.water_p = j.value("water_p", d.water_p);
  c.threads = j.value("threads", d.threads);
  c.deterministic = j.value("deterministic", d.deterministic);
}
}  // namespace transport

// ---- Dataset ---------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

struct Provenance {
  std::string generator;
  std::uint64_t seed = 0;
};

enum class SplitPart { Train, Calibration, Test };

inline const char* part_name(SplitPart p) {
  switch (p) {
    case SplitPart::Train: return "train";
    case SplitPart::Calibration: return "calibration";
    case SplitPart::Test: return "test";
  }
  return "?";
}

struct Split {
  std::vector<std::size_t> train, calibration, test;

  const std::vector<std::size_t>& part(SplitPart p) const {
    switch (p) {
      case SplitPart::Train: return train;
      case SplitPart::Calibration: return calibration;
      case SplitPart::Test: return test;
    }
    return train;
  }

  /// The indices of `p`, which a consumer needs to be nonempty.
  const std::vector<std::size_t>& require(SplitPart p) const {
    const auto& v = part(p);
    if (v.empty()) throw PreconditionError(std::string("dataset split '") + part_name(p) + "' is empty");
    return v;
  }

  bool empty() const noexcept { return train.empty() && calibration.empty() && test.empty(); }
};

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
  std::string experiment;
  std::vector<std::size_t> output_dims;
  bool log_targets = false;
  RowMatrixF inputs;   // N x d
  RowMatrixF targets;  // N x M
  std::optional<std::vector<float>> range_targets;
  std::vector<Provenance> provenance;
  json generator;
  Split split;

  std::size_t size() const noexcept { return static_cast<std::size_t>(inputs.rows()); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(inputs.cols()); }
  std::size_t output_dim() const noexcept { return static_cast<std::size_t>(targets.cols()); }

  InputVector input(std::size_t i) const {
    InputVector x(input_dim());
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    return x;
  }

  Eigen::VectorXd target(std::size_t i, bool range = false) const {
    if (range) return Eigen::VectorXd::Constant(1, static_cast<double>(range_targets.value().at(i)));
    return targets.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }

  /// Column-major training pairs for the selected samples.
  nn::TrainingSet<float> training_set(const std::vector<std::size_t>& indices, bool range = false) const {
    if (range && !range_targets) throw PreconditionError("dataset has no range targets");
    nn::TrainingSet<float> set;
    const auto n = static_cast<Eigen::Index>(indices.size());
    set.inputs.resize(static_cast<Eigen::Index>(input_dim()), n);
    set.targets.resize(range ? 1 : static_cast<Eigen::Index>(output_dim()), n);
    for (Eigen::Index c = 0; c < n; ++c) {
      const auto i = static_cast<Eigen::Index>(indices[static_cast<std::size_t>(c)]);
      set.inputs.col(c) = inputs.row(i).transpose();
      if (range)
        set.targets(0, c) = (*range_targets)[static_cast<std::size_t>(i)];
      else
        set.targets.col(c) = targets.row(i).transpose();
    }
    return set;
  }

  std::vector<uq::LabelledInput> labelled(const std::vector<std::size_t>& indices, bool range = false) const {
    std::vector<uq::LabelledInput> out;
    for (auto i : indices) out.push_back({input(i), target(i, range)});
    return out;
  }
};

// ---- Generators ------------------------------------------------------------

struct Generator1D {
  InputDistribution dist = distributions::bragg_kleeman();
  double depth = 20.0;  // cm
  std::size_t voxels = 400;
  double spectrum_variance = 3.0;  // MeV^2
  std::size_t nodes = 64;
  double edge_fraction = 0.8;

  json to_json() const {
    return {{"kind", "analytic1d"}, {"dist", dist}, {"depth", depth}, {"voxels", voxels},
            {"spectrum_variance", spectrum_variance}, {"nodes", nodes}, {"edge_fraction", edge_fraction}};
  }
  static Generator1D from_json(const json& j) {
    Generator1D g;
    g.dist = j.at("dist").get<InputDistribution>();
    g.depth = j.value("depth", g.depth);
    g.voxels = j.value("voxels", g.voxels);
    g.spectrum_variance = j.value("spectrum_variance", g.spectrum_variance);
    g.nodes = j.value("nodes", g.nodes);
    g.edge_fraction = j.value("edge_fraction", g.edge_fraction);
    return g;
  }
};

inline analytic::BraggKleemanParams bragg_kleeman_from_input(const InputVector& x) {
  if (x.size() != 4) throw ShapeError("1-D inputs must be (alpha, p, rho, E_peak)");
  return {x[0], x[1], x[2], x[3]};
}

struct Sample1D {
  InputVector x;
  analytic::DoseCurve curve;
  double edge = 0.0;
};

inline Sample1D generate_1d_sample(const Generator1D& g, std::uint64_t sample_seed) {
  Sample1D s;
  s.x = sample_inputs(g.dist, 1, sample_seed).front();
  const analytic::DepthGrid grid(g.depth, g.voxels);
  const auto params = bragg_kleeman_from_input(s.x);
  s.curve = analytic::depth_dose_spectrum(params, grid, g.spectrum_variance, g.nodes);
  s.edge = analytic::distal_edge(s.curve, g.edge_fraction);
  return s;
}

/// Sample i draws from split_seed(seed, i); every sample is reproducible from
/// its provenance seed alone.
inline Dataset generate_1d(std::size_t n, const Generator1D& g, std::uint64_t seed) {
  if (n < 1) throw PreconditionError("generate_1d: N must be >= 1");
  Dataset ds;
  ds.experiment = "e1";
  ds.output_dims = {g.voxels};
  ds.generator = g.to_json();
  ds.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(g.dist.dim()));
  ds.targets.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(g.voxels));
  ds.range_targets.emplace(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = split_seed(seed, i);
    Sample1D sample;
    try {
      sample = generate_1d_sample(g, s);
    } catch (const Error& e) {
      throw SpectrumError("generate_1d: sample " + std::to_string(i) + ": " + e.what());
    }
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < sample.x.size(); ++k) ds.inputs(r, static_cast<Eigen::Index>(k)) = static_cast<float>(sample.x[k]);
    for (std::size_t k = 0; k < g.voxels; ++k) ds.targets(r, static_cast<Eigen::Index>(k)) = static_cast<float>(sample.curve.dose[k]);
    (*ds.range_targets)[i] = static_cast<float>(sample.edge);
    ds.provenance.push_back({"analytic1d", s});
  }
  return ds;
}

/// Bone-water slab with the pencil beam entering at +x travelling along -x.
struct Generator2D {
  InputDistribution dist = distributions::slab_shift();
  VoxelGrid grid = VoxelGrid({{300, -7.5, 7.5}, {40, -5.0, 5.0}, {1, -5.0, 5.0}});
  std::size_t histories = 10000;
  transport::TransportConfig transport;
  double energy = 150.0;         // MeV, nominal
  double energy_sigma = 1.0;     // MeV
  double spatial_sigma = 0.0;    // cm
  double angular_sigma = 0.0;    // rad
  double beam_angle = 3.14159265358979323846;  // rad, in the x-y plane
  Vec3 entry = Vec3(7.5, 0.0, 0.0);
  Material background = water();
  Material slab = bone();
  double log_shift = 1e-10;

  json to_json() const {
    return {{"kind", "mc2d"}, {"dist", dist}, {"grid", grid_to_json(grid)}, {"histories", histories},
            {"transport", transport}, {"energy", energy}, {"energy_sigma", energy_sigma},
            {"spatial_sigma", spatial_sigma}, {"angular_sigma", angular_sigma}, {"beam_angle", beam_angle},
            {"entry", {entry.x(), entry.y(), entry.z()}}, {"background", background}, {"slab", slab},
            {"log_shift", log_shift}};
  }
  static Generator2D from_json(const json& j) {
    Generator2D g;
    g.dist = j.at("dist").get<InputDistribution>();
    if (j.contains("grid")) g.grid = grid_from_json(j.at("grid"));
    g.histories = j.value("histories", g.histories);
    if (j.contains("transport")) g.transport = j.at("transport").get<transport::TransportConfig>();
    g.energy = j.value("energy", g.energy);
    g.energy_sigma = j.value("energy_sigma", g.energy_sigma);
    g.spatial_sigma = j.value("spatial_sigma", g.spatial_sigma);
    g.angular_sigma = j.value("angular_sigma", g.angular_sigma);
    g.beam_angle = j.value("beam_angle", g.beam_angle);
    if (j.contains("entry")) {
      const auto e = j.at("entry").get<std::array<double, 3>>();
      g.entry = Vec3(e[0], e[1], e[2]);
    }
    if (j.contains("background")) g.background = j.at("background").get<Material>();
    if (j.contains("slab")) g.slab = j.at("slab").get<Material>();
    g.log_shift = j.value("log_shift", g.log_shift);
    return g;
  }

  /// Slab phantom and beam for input x = (x1, x2[, x3, x4]).
  std::pair<Phantom, BeamSpec> setup(const InputVector& x) const {
    if (x.size() != 2 && x.size() != 4) throw ShapeError("2-D inputs must have 2 or 4 components");
    Phantom phantom = build_slab_phantom(x[0], x[1], grid, background, slab);
    BeamSpec beam;
    beam.entry = entry;
    const double angle = beam_angle + (x.size() == 4 ? x[2] : 0.0);
    beam.direction = BeamSpec::in_plane_direction(angle);
    beam.energy_mean = energy + (x.size() == 4 ? x[3] : 0.0);
    beam.energy_sigma = energy_sigma;
    beam.spatial_sigma = spatial_sigma;
    beam.angular_sigma = angular_sigma;
    return {std::move(phantom), beam};
  }
};

/// Water cube irradiated from the +z face; x shifts the beam laterally.
struct Generator3D {
  InputDistribution dist = distributions::beam_shift();
  VoxelGrid grid = VoxelGrid({{30, -20.0, 20.0}, {30, -20.0, 20.0}, {30, -20.0, 20.0}});
  std::size_t histories = 20000;
  transport::TransportConfig transport;
  double energy = 200.0;
  double energy_sigma = 3.0;
  double spatial_sigma = 0.65;
  double angular_sigma = 0.0032;
  Material medium = water();
  double log_shift = 1e-10;

  json to_json() const {
    return {{"kind", "mc3d"}, {"dist", dist}, {"grid", grid_to_json(grid)}, {"histories", histories},
            {"transport", transport}, {"energy", energy}, {"energy_sigma", energy_sigma},
            {"spatial_sigma", spatial_sigma}, {"angular_sigma", angular_sigma}, {"medium", medium},
            {"log_shift", log_shift}};
  }
  static Generator3D from_json(const json& j) {
    Generator3D g;
    g.dist = j.at("dist").get<InputDistribution>();
    if (j.contains("grid")) g.grid = grid_from_json(j.at("grid"));
    g.histories = j.value("histories", g.histories);
    if (j.contains("transport")) g.transport = j.at("transport").get<transport::TransportConfig>();
    g.energy = j.value("energy", g.energy);
    g.energy_sigma = j.value("energy_sigma", g.energy_sigma);
    g.spatial_sigma = j.value("spatial_sigma", g.spatial_sigma);
    g.angular_sigma = j.value("angular_sigma", g.angular_sigma);
    if (j.contains("medium")) g.medium = j.at("medium").get<Material>();
    g.log_shift = j.value("log_shift", g.log_shift);
    return g;
  }

  std::pair<Phantom, BeamSpec> setup(const InputVector& x) const {
    if (x.size() != 2) throw ShapeError("3-D inputs must have 2 components");
    Phantom phantom = build_homogeneous_phantom(medium, grid);
    BeamSpec beam;
    beam.entry = Vec3(x[0], x[1], grid.upper(2));
    beam.direction = Vec3(0.0, 0.0, -1.0);
    beam.energy_mean = energy;
    beam.energy_sigma = energy_sigma;
    beam.spatial_sigma = spatial_sigma;
    beam.angular_sigma = angular_sigma;
    return {std::move(phantom), beam};
  }
};

/// Linear dose of one Monte Carlo sample; transport is seeded from
/// split_seed(sample_seed, 1).
template <class Gen>
transport::DoseEstimate simulate_sample(const Gen& g, const InputVector& x, std::uint64_t sample_seed) {
  auto [phantom, beam] = g.setup(x);
  return transport::estimate_dose(phantom, beam, g.histories, g.transport, split_seed(sample_seed, 1));
}

inline transport::DoseField mc_target(const Generator2D& g, const transport::DoseEstimate& est) {
  return transport::project_log_dose(est.dose, 2, g.log_shift);
}
inline transport::DoseField mc_target(const Generator3D& g, const transport::DoseEstimate& est) {
  return transport::log_dose(est.dose, g.log_shift);
}

namespace detail {

template <class Gen>
Dataset generate_mc(std::size_t n, const Gen& g, std::uint64_t seed, const std::string& experiment,
                    const std::string& tag) {
  if (n < 1) throw PreconditionError("generate: N must be >= 1");
  if (g.histories < 1) throw PreconditionError("generate: histories must be >= 1");
  Dataset ds;
  ds.experiment = experiment;
  ds.log_targets = true;
  ds.generator = g.to_json();
  ds.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(g.dist.dim()));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = split_seed(seed, i);
    const auto x = sample_inputs(g.dist, 1, s).front();
    const auto field = mc_target(g, simulate_sample(g, x, s));
    if (i == 0) {
      ds.output_dims = field.grid.shape();
      ds.targets.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(field.values.size()));
    }
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < x.size(); ++k) ds.inputs(r, static_cast<Eigen::Index>(k)) = static_cast<float>(x[k]);
    for (std::size_t k = 0; k < field.values.size(); ++k)
      ds.targets(r, static_cast<Eigen::Index>(k)) = static_cast<float>(field.values[k]);
    ds.provenance.push_back({tag, s});
  }
  return ds;
}

}  // namespace detail

inline Dataset generate_2d(std::size_t n, const Generator2D& g, std::uint64_t seed, const std::string& experiment = "e5") {
  return detail::generate_mc(n, g, seed, experiment, "mc2d");
}

inline Dataset generate_3d(std::size_t n, const Generator3D& g, std::uint64_t seed, const std::string& experiment = "e7") {
  return detail::generate_mc(n, g, seed, experiment, "mc3d");
}

/// Rebuilds sample `i` from the generator snapshot and its provenance seed.
inline std::pair<InputVector, std::vector<float>> regenerate_sample(const Dataset& ds, std::size_t i) {
  const auto& prov = ds.provenance.at(i);
  const std::string kind = ds.generator.at("kind").get<std::string>();
  std::vector<float> target;
  InputVector x;
  if (kind == "analytic1d") {
    const auto g = Generator1D::from_json(ds.generator);
    const auto s = generate_1d_sample(g, prov.seed);
    x = s.x;
    for (double d : s.curve.dose) target.push_back(static_cast<float>(d));
  } else if (kind == "mc2d") {
    const auto g = Generator2D::from_json(ds.generator);
    x = sample_inputs(g.dist, 1, prov.seed).front();
    for (double d : mc_target(g, simulate_sample(g, x, prov.seed)).values) target.push_back(static_cast<float>(d));
  } else if (kind == "mc3d") {
    const auto g = Generator3D::from_json(ds.generator);
    x = sample_inputs(g.dist, 1, prov.seed).front();
    for (double d : mc_target(g, simulate_sample(g, x, prov.seed)).values) target.push_back(static_cast<float>(d));
  } else {
    throw FormatError("unknown generator kind '" + kind + "'");
  }
  return {x, target};
}

// ---- Splitting ---------------------------------------------------------------

/// Random disjoint split with sizes from the largest-remainder rule.
inline Split make_split(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw PreconditionError("split fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw PreconditionError("split fractions must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = fractions[k] * static_cast<double>(n);
    sizes[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainder[k] = exact - static_cast<double>(sizes[k]);
    assigned += sizes[k];
  }
  while (assigned < n) {
    const auto k = static_cast<std::size_t>(std::max_element(remainder.begin(), remainder.end()) - remainder.begin());
    ++sizes[k];
    remainder[k] = -1.0;
    ++assigned;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto rng = make_rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Split s;
  auto it = idx.begin();
  s.train.assign(it, it + static_cast<long>(sizes[0]));
  it += static_cast<long>(sizes[0]);
  s.calibration.assign(it, it + static_cast<long>(sizes[1]));
  it += static_cast<long>(sizes[1]);
  s.test.assign(it, idx.end());
  for (auto* v : {&s.train, &s.calibration, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

inline void split(Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  ds.split = make_split(ds.size(), fractions, seed);
}

// ---- Persistence ------------------------------------------------------------

inline std::uint32_t crc32_of(const void* data, std::size_t bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (bytes > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    bytes -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline std::vector<char> encode_f32(const float* data, std::size_t count) {
  std::vector<char> out(count * 4);
  for (std::size_t i = 0; i < count; ++i) {
    const auto v = nn::detail::to_little(data[i]);
    std::memcpy(out.data() + 4 * i, &v, 4);
  }
  return out;
}

inline void decode_f32(const char* bytes, std::size_t count, float* out) {
  for (std::size_t i = 0; i < count; ++i) {
    float v;
    std::memcpy(&v, bytes + 4 * i, 4);
    out[i] = nn::detail::to_little(v);
  }
}

}  // namespace detail

/// Writes `dir/manifest.json` (human-readable metadata) and `dir/arrays.bin`
/// (float32 little-endian tensors, offsets and CRC-32 in the manifest).
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, std::vector<char>>> tensors;
  std::vector<std::vector<std::size_t>> shapes;
  tensors.emplace_back("inputs", detail::encode_f32(ds.inputs.data(), static_cast<std::size_t>(ds.inputs.size())));
  shapes.push_back({ds.size(), ds.input_dim()});
  tensors.emplace_back("targets", detail::encode_f32(ds.targets.data(), static_cast<std::size_t>(ds.targets.size())));
  shapes.push_back({ds.size(), ds.output_dim()});
  if (ds.range_targets) {
    tensors.emplace_back("range_targets", detail::encode_f32(ds.range_targets->data(), ds.range_targets->size()));
    shapes.push_back({ds.range_targets->size()});
  }

  json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["experiment"] = ds.experiment;
  manifest["input_dim"] = ds.input_dim();
  manifest["output_dims"] = ds.output_dims;
  manifest["sample_count"] = ds.size();
  manifest["log_targets"] = ds.log_targets;
  manifest["generator"] = ds.generator;
  manifest["split"] = {{"train", ds.split.train}, {"calibration", ds.split.calibration}, {"test", ds.split.test}};
  json prov = json::array();
  for (const auto& p : ds.provenance) prov.push_back({{"generator", p.generator}, {"seed", p.seed}});
  manifest["provenance"] = prov;
  json tj = json::array();
  std::size_t offset = 0;
  std::ofstream blob(dir / "arrays.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw Error("cannot write " + (dir / "arrays.bin").string());
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& bytes = tensors[t].second;
    blob.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    tj.push_back({{"name", tensors[t].first}, {"dtype", "float32_le"}, {"shape", shapes[t]}, {"offset", offset},
                  {"bytes", bytes.size()}, {"crc32", crc32_of(bytes.data(), bytes.size())}});
    offset += bytes.size();
  }
  if (!blob) throw Error("failed writing dataset arrays");
  manifest["tensors"] = tj;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  if (!mf) throw Error("failed writing dataset manifest");
}

/// Reads and validates only the manifest.
inline json load_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("missing manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kDatasetFormatVersion) throw FormatError("unsupported dataset format version " + std::to_string(version));
  return manifest;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const json manifest = load_manifest(dir);
  Dataset ds;
  try {
    ds.experiment = manifest.at("experiment").get<std::string>();
    ds.output_dims = manifest.at("output_dims").get<std::vector<std::size_t>>();
    ds.log_targets = manifest.at("log_targets").get<bool>();
    ds.generator = manifest.at("generator");
    const auto& sp = manifest.at("split");
    sp.at("train").get_to(ds.split.train);
    sp.at("calibration").get_to(ds.split.calibration);
    sp.at("test").get_to(ds.split.test);
    for (const auto& p : manifest.at("provenance"))
      ds.provenance.push_back({p.at("generator").get<std::string>(), p.at("seed").get<std::uint64_t>()});
  } catch (const json::exception& e) {
    throw FormatError(std::string("incomplete dataset manifest: ") + e.what());
  }
  const auto n = manifest.at("sample_count").get<std::size_t>();
  const auto d = manifest.at("input_dim").get<std::size_t>();

  std::ifstream blob(dir / "arrays.bin", std::ios::binary);
  if (!blob) throw FormatError("missing arrays.bin in " + dir.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  bool have_inputs = false, have_targets = false;
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto size = t.at("bytes").get<std::size_t>();
    const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    if (count * 4 != size) throw FormatError("tensor '" + name + "' shape disagrees with its byte size");
    if (offset + size > bytes.size()) throw FormatError("tensor '" + name + "' extends past the end of arrays.bin");
    if (crc32_of(bytes.data() + offset, size) != t.at("crc32").get<std::uint32_t>())
      throw FormatError("checksum mismatch in tensor '" + name + "'");
    const char* src = bytes.data() + offset;
    if (name == "inputs") {
      if (shape.size() != 2 || shape[0] != n || shape[1] != d) throw FormatError("inputs tensor shape mismatch");
      ds.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
      detail::decode_f32(src, count, ds.inputs.data());
      have_inputs = true;
    } else if (name == "targets") {
      const std::size_t m = std::accumulate(ds.output_dims.begin(), ds.output_dims.end(), std::size_t{1}, std::multiplies<>());
      if (shape.size() != 2 || shape[0] != n || shape[1] != m) throw FormatError("targets tensor shape mismatch");
      ds.targets.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
      detail::decode_f32(src, count, ds.targets.data());
      have_targets = true;
    } else if (name == "range_targets") {
      if (shape.size() != 1 || shape[0] != n) throw FormatError("range target tensor shape mismatch");
      ds.range_targets.emplace(n);
      detail::decode_f32(src, count, ds.range_targets->data());
    }
  }
  if (!have_inputs || !have_targets) throw FormatError("dataset is missing its inputs or targets tensor");
  if (ds.provenance.size() != n) throw FormatError("provenance count disagrees with sample count");
  return ds;
}

}  // namespace pdose
