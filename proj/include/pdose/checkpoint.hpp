#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pdose/error.hpp"
#include "pdose/mlp.hpp"

// Checkpoint layout, all little-endian:
//   8 bytes   magic "PDOSEMLP"
//   u32       format version
//   u32 x 8   n_in, width, hidden_layers, dropout_layers, n_out, order, has_floor, layer_count
//   f64 x 2   p_drop, output_floor (0 when absent)
//   per layer: u32 rows, u32 cols, rows*cols f32 weights (row-major), rows f32 bias
//   u32 n_in, n_in f32 input shift, n_in f32 input scale

namespace pdose::nn {

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'D', 'O', 'S', 'E', 'M', 'L', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}
  template <class T>
  void put(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(is) {}
  template <class T>
  T get() {
    T v;
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(T))) throw FormatError("checkpoint is truncated");
    return to_little(v);
  }
  void bytes(char* p, std::size_t n) {
    is_.read(p, static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n)) throw FormatError("checkpoint is truncated");
  }

 private:
  std::istream& is_;
};

}  // namespace detail

template <class Scalar>
void save_checkpoint(const Mlp<Scalar>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  detail::BinaryWriter w(os);
  const auto& c = model.config();
  const auto& p = model.params();
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  for (std::size_t v : {c.n_in, c.width, c.hidden_layers, c.dropout_layers, c.n_out})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.order));
  w.put<std::uint32_t>(c.output_floor ? 1u : 0u);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.layer_count()));
  w.put<double>(c.p_drop);
  w.put<double>(c.output_floor.value_or(0.0));
  for (std::size_t l = 0; l < c.layer_count(); ++l) {
    const auto& m = p.weights[l];
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index k = 0; k < m.cols(); ++k) w.put<float>(static_cast<float>(m(r, k)));
    for (Eigen::Index r = 0; r < p.biases[l].size(); ++r) w.put<float>(static_cast<float>(p.biases[l](r)));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.n_in));
  for (Eigen::Index i = 0; i < p.input_shift.size(); ++i) w.put<float>(static_cast<float>(p.input_shift(i)));
  for (Eigen::Index i = 0; i < p.input_scale.size(); ++i) w.put<float>(static_cast<float>(p.input_scale(i)));
  if (!os) throw Error("failed writing checkpoint: " + path.string());
}

/// Reads a checkpoint written by save_checkpoint. Parameters are stored as
/// float32, so a float model roundtrips bit-exactly.
inline Mlp<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  detail::BinaryReader r(is);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  MlpConfig c;
  c.n_in = r.get<std::uint32_t>();
  c.width = r.get<std::uint32_t>();
  c.hidden_layers = r.get<std::uint32_t>();
  c.dropout_layers = r.get<std::uint32_t>();
  c.n_out = r.get<std::uint32_t>();
  const auto order = r.get<std::uint32_t>();
  if (order > 1) throw FormatError("invalid block order in checkpoint");
  c.order = static_cast<BlockOrder>(order);
  const bool has_floor = r.get<std::uint32_t>() != 0;
  const auto layers = r.get<std::uint32_t>();
  c.p_drop = r.get<double>();
  const double floor = r.get<double>();
  if (has_floor) c.output_floor = floor;
  try {
    c.validate();
  } catch (const PreconditionError& e) {
    throw FormatError(std::string("invalid checkpoint header: ") + e.what());
  }
  if (layers != c.layer_count()) throw ShapeError("checkpoint layer count disagrees with its header");

  auto p = ModelParams<float>::zeros(c);
  for (std::size_t l = 0; l < c.layer_count(); ++l) {
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != c.fan_out(l) || cols != c.fan_in(l))
      throw ShapeError("checkpoint tensor " + std::to_string(l) + " shape disagrees with its header");
    auto& m = p.weights[l];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index k = 0; k < m.cols(); ++k) m(i, k) = r.get<float>();
    for (Eigen::Index i = 0; i < p.biases[l].size(); ++i) p.biases[l](i) = r.get<float>();
  }
  if (r.get<std::uint32_t>() != c.n_in) throw ShapeError("checkpoint input standardisation size mismatch");
  for (Eigen::Index i = 0; i < p.input_shift.size(); ++i) p.input_shift(i) = r.get<float>();
  for (Eigen::Index i = 0; i < p.input_scale.size(); ++i) p.input_scale(i) = r.get<float>();
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
  return Mlp<float>(c, std::move(p));
}

/// Loads and checks the stored configuration against `expected`.
inline Mlp<float> load_checkpoint(const std::filesystem::path& path, const MlpConfig& expected) {
  auto model = load_checkpoint(path);
  const auto& c = model.config();
  if (c.n_in != expected.n_in || c.n_out != expected.n_out || c.width != expected.width ||
      c.hidden_layers != expected.hidden_layers || c.dropout_layers != expected.dropout_layers)
    throw ShapeError("checkpoint network shape differs from the expected configuration");
  return model;
}

}  // namespace pdose::nn
