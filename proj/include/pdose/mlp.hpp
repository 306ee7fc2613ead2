#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pdose/error.hpp"
#include "pdose/random.hpp"

namespace pdose::nn {

/// Placement of the dropout block relative to the plain hidden block.
enum class BlockOrder : std::uint32_t { DropoutFirst = 0, HiddenFirst = 1 };

struct MlpConfig {
  std::size_t n_in = 1;
  std::size_t width = 32;
  std::size_t hidden_layers = 3;   // L_h
  std::size_t dropout_layers = 3;  // L_d
  std::size_t n_out = 1;
  double p_drop = 0.05;
  std::optional<double> output_floor;
  BlockOrder order = BlockOrder::DropoutFirst;

  void validate() const {
    if (n_in < 1 || width < 1 || n_out < 1) throw PreconditionError("MLP dimensions must be >= 1");
    if (!(p_drop >= 0.0 && p_drop < 1.0)) throw PreconditionError("p_drop must lie in [0, 1)");
    if (output_floor && !std::isfinite(*output_floor)) throw PreconditionError("output floor must be finite");
  }

  /// Input layer, body layers, output layer.
  std::size_t layer_count() const noexcept { return hidden_layers + dropout_layers + 2; }

  /// True when layer `l` (0 = input layer) carries a dropout mask.
  bool is_dropout_layer(std::size_t l) const noexcept {
    if (l == 0 || l + 1 >= layer_count()) return false;
    const std::size_t body = l - 1;
    return order == BlockOrder::DropoutFirst ? body < dropout_layers : body >= hidden_layers;
  }

  /// Position of layer `l` among the dropout layers.
  std::size_t dropout_slot(std::size_t l) const noexcept {
    const std::size_t body = l - 1;
    return order == BlockOrder::DropoutFirst ? body : body - hidden_layers;
  }

  std::size_t fan_in(std::size_t l) const noexcept { return l == 0 ? n_in : width; }
  std::size_t fan_out(std::size_t l) const noexcept { return l + 1 == layer_count() ? n_out : width; }

  friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Weights and biases per layer plus the fixed affine input standardisation
/// x' = (x - shift) / scale.
template <class Scalar>
struct ModelParams {
  std::vector<Matrix<Scalar>> weights;
  std::vector<Vector<Scalar>> biases;
  Vector<Scalar> input_shift;
  Vector<Scalar> input_scale;

  static ModelParams zeros(const MlpConfig& cfg) {
    ModelParams p;
    for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
      p.weights.push_back(Matrix<Scalar>::Zero(static_cast<Eigen::Index>(cfg.fan_out(l)),
                                               static_cast<Eigen::Index>(cfg.fan_in(l))));
      p.biases.push_back(Vector<Scalar>::Zero(static_cast<Eigen::Index>(cfg.fan_out(l))));
    }
    p.input_shift = Vector<Scalar>::Zero(static_cast<Eigen::Index>(cfg.n_in));
    p.input_scale = Vector<Scalar>::Ones(static_cast<Eigen::Index>(cfg.n_in));
    return p;
  }

  bool matches(const MlpConfig& cfg) const {
    if (weights.size() != cfg.layer_count() || biases.size() != cfg.layer_count()) return false;
    for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
      if (static_cast<std::size_t>(weights[l].rows()) != cfg.fan_out(l) ||
          static_cast<std::size_t>(weights[l].cols()) != cfg.fan_in(l) ||
          static_cast<std::size_t>(biases[l].size()) != cfg.fan_out(l))
        return false;
    }
    return static_cast<std::size_t>(input_shift.size()) == cfg.n_in &&
           static_cast<std::size_t>(input_scale.size()) == cfg.n_in;
  }

  bool all_finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return input_shift.allFinite() && input_scale.allFinite();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l)
      n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
  }

  template <class Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (const auto& w : weights) out.weights.push_back(w.template cast<Other>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<Other>());
    out.input_shift = input_shift.template cast<Other>();
    out.input_scale = input_scale.template cast<Other>();
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.weights.size() != b.weights.size()) return false;
    for (std::size_t l = 0; l < a.weights.size(); ++l)
      if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
    return a.input_shift == b.input_shift && a.input_scale == b.input_scale;
  }
};

/// He-normal weights (variance 2 / fan_in), zero biases.
template <class Scalar>
ModelParams<Scalar> init_params(const MlpConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto p = ModelParams<Scalar>::zeros(cfg);
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const double sd = std::sqrt(2.0 / static_cast<double>(cfg.fan_in(l)));
    auto& w = p.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<Scalar>(sd * gauss(rng));
  }
  return p;
}

/// Keep flags for one dropout layer: 1 with probability 1 - p_drop.
struct DropoutMask {
  std::vector<std::uint8_t> keep;

  double zero_fraction() const {
    if (keep.empty()) return 0.0;
    const auto zeros = std::count(keep.begin(), keep.end(), std::uint8_t{0});
    return static_cast<double>(zeros) / static_cast<double>(keep.size());
  }
};

inline DropoutMask sample_mask(std::size_t width, double p_drop, std::uint64_t seed) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw PreconditionError("sample_mask: p_drop must lie in [0, 1)");
  DropoutMask m;
  m.keep.assign(width, 1);
  if (p_drop == 0.0) return m;
  auto rng = make_rng(seed);
  std::bernoulli_distribution retain(1.0 - p_drop);
  for (auto& k : m.keep) k = retain(rng) ? 1 : 0;
  return m;
}

/// Mask matrices for each dropout layer; each is width x 1 (shared across the
/// batch) or width x batch (one column of masks per sample).
template <class Scalar>
using MaskSet = std::vector<Matrix<Scalar>>;

/// Masks of one stochastic pass: dropout layer m draws from split_seed(seed, m).
template <class Scalar>
MaskSet<Scalar> masks_for_seed(const MlpConfig& cfg, std::uint64_t seed) {
  MaskSet<Scalar> set;
  for (std::size_t m = 0; m < cfg.dropout_layers; ++m) {
    const auto mask = sample_mask(cfg.width, cfg.p_drop, split_seed(seed, m));
    Matrix<Scalar> col(static_cast<Eigen::Index>(cfg.width), 1);
    for (std::size_t i = 0; i < cfg.width; ++i) col(static_cast<Eigen::Index>(i), 0) = mask.keep[i] ? Scalar(1) : Scalar(0);
    set.push_back(std::move(col));
  }
  return set;
}

/// Intermediate values of a batched forward pass kept for backpropagation.
template <class Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> activations;  // a_0 (standardised input) .. a_L
  std::vector<Matrix<Scalar>> pre;          // pre-activations per layer
  Matrix<Scalar> output;                    // after the optional floor
  Matrix<Scalar> raw_output;
};

/// Feedforward network C_out o (hidden block) o (dropout block) o C_in with
/// ReLU activations. A dropout layer computes relu(B * (M a) + b); masks are
/// not rescaled, during training or inference.
template <class Scalar>
class Mlp {
 public:
  using Mat = Matrix<Scalar>;

  Mlp() = default;
  Mlp(MlpConfig cfg, ModelParams<Scalar> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    if (!params_.matches(cfg_)) throw ShapeError("parameters do not match MLP configuration");
  }

  static Mlp initialised(const MlpConfig& cfg, std::uint64_t seed) { return Mlp(cfg, init_params<Scalar>(cfg, seed)); }

  const MlpConfig& config() const noexcept { return cfg_; }
  const ModelParams<Scalar>& params() const noexcept { return params_; }
  ModelParams<Scalar>& mutable_params() noexcept { return params_; }
  std::size_t input_dim() const noexcept { return cfg_.n_in; }
  std::size_t output_dim() const noexcept { return cfg_.n_out; }

  /// Columns of `inputs` are samples. `masks` empty means identity masks.
  void forward_batch(const Mat& inputs, const MaskSet<Scalar>& masks, ForwardCache<Scalar>& cache,
                     bool keep_cache = true) const {
    if (static_cast<std::size_t>(inputs.rows()) != cfg_.n_in) throw ShapeError("input dimension mismatch");
    if (!masks.empty() && masks.size() != cfg_.dropout_layers) throw ShapeError("mask count mismatch");
    const std::size_t L = cfg_.layer_count();
    cache.activations.resize(keep_cache ? L : 1);
    cache.pre.resize(keep_cache ? L : 1);
    Mat a = (inputs.colwise() - params_.input_shift).array().colwise() / params_.input_scale.array();
    for (std::size_t l = 0; l + 1 < L; ++l) {
      Mat z = params_.weights[l] * a;
      if (cfg_.is_dropout_layer(l) && !masks.empty()) apply_mask(z, masks[cfg_.dropout_slot(l)]);
      z.colwise() += params_.biases[l];
      if (keep_cache) {
        cache.activations[l] = a;
        cache.pre[l] = z;
      }
      a = z.cwiseMax(Scalar(0));
    }
    cache.raw_output = params_.weights[L - 1] * a;
    cache.raw_output.colwise() += params_.biases[L - 1];
    if (keep_cache) cache.activations[L - 1] = std::move(a);
    cache.output = cfg_.output_floor ? cache.raw_output.cwiseMax(static_cast<Scalar>(*cfg_.output_floor))
                                     : cache.raw_output;
  }

  Mat forward_batch(const Mat& inputs, const MaskSet<Scalar>& masks = {}) const {
    ForwardCache<Scalar> cache;
    forward_batch(inputs, masks, cache, false);
    return std::move(cache.output);
  }

  /// Deterministic forward: every mask is the identity.
  Vector<double> forward(std::span<const double> x) const { return single(x, {}); }

  /// Stochastic forward with masks drawn from `seed`.
  Vector<double> forward(std::span<const double> x, std::uint64_t seed) const {
    return single(x, masks_for_seed<Scalar>(cfg_, seed));
  }

  /// Outputs of passes first..first+count-1 for input `x`, one column per
  /// pass. Pass t uses the masks of forward(x, split_seed(seed, t)).
  Eigen::MatrixXd sample_passes(std::span<const double> x, std::size_t first, std::size_t count,
                                std::uint64_t seed) const {
    if (x.size() != cfg_.n_in) throw ShapeError("input dimension mismatch");
    const std::size_t L = cfg_.layer_count();
    const auto n = static_cast<Eigen::Index>(count);
    // Layers ahead of the first dropout layer are identical for every pass.
    std::size_t first_drop = L - 1;
    for (std::size_t l = 0; l + 1 < L; ++l)
      if (cfg_.is_dropout_layer(l)) {
        first_drop = l;
        break;
      }
    Mat col(static_cast<Eigen::Index>(cfg_.n_in), 1);
    for (std::size_t i = 0; i < cfg_.n_in; ++i) col(static_cast<Eigen::Index>(i), 0) = static_cast<Scalar>(x[i]);
    Mat a = (col - params_.input_shift).array() / params_.input_scale.array();
    for (std::size_t l = 0; l < first_drop; ++l) {
      Mat z = params_.weights[l] * a;
      z.colwise() += params_.biases[l];
      a = z.cwiseMax(Scalar(0));
    }
    const bool stochastic = cfg_.p_drop > 0.0 && cfg_.dropout_layers > 0;
    Mat batch = stochastic ? Mat(a.replicate(1, n)) : a;
    std::vector<Mat> masks;
    if (stochastic) {
      masks.assign(cfg_.dropout_layers, Mat::Ones(static_cast<Eigen::Index>(cfg_.width), n));
      for (std::size_t t = 0; t < count; ++t) {
        const std::uint64_t pass_seed = split_seed(seed, first + t);
        for (std::size_t m = 0; m < cfg_.dropout_layers; ++m) {
          const auto mask = sample_mask(cfg_.width, cfg_.p_drop, split_seed(pass_seed, m));
          for (std::size_t i = 0; i < cfg_.width; ++i)
            masks[m](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = mask.keep[i] ? Scalar(1) : Scalar(0);
        }
      }
    }
    for (std::size_t l = first_drop; l + 1 < L; ++l) {
      Mat z = params_.weights[l] * batch;
      if (cfg_.is_dropout_layer(l) && !masks.empty()) z.array() *= masks[cfg_.dropout_slot(l)].array();
      z.colwise() += params_.biases[l];
      batch = z.cwiseMax(Scalar(0));
    }
    Mat out = params_.weights[L - 1] * batch;
    out.colwise() += params_.biases[L - 1];
    if (cfg_.output_floor) out = out.cwiseMax(static_cast<Scalar>(*cfg_.output_floor));
    if (!out.allFinite()) throw NumericError("non-finite network output");
    if (!stochastic) return out.template cast<double>().replicate(1, n);
    return out.template cast<double>();
  }

 private:
  static void apply_mask(Mat& z, const Mat& mask) {
    if (mask.cols() == 1) {
      z.array().colwise() *= mask.col(0).array();
    } else {
      if (mask.cols() != z.cols()) throw ShapeError("mask batch size mismatch");
      z.array() *= mask.array();
    }
  }

  Vector<double> single(std::span<const double> x, const MaskSet<Scalar>& masks) const {
    if (x.size() != cfg_.n_in) throw ShapeError("input dimension mismatch");
    Mat col(static_cast<Eigen::Index>(cfg_.n_in), 1);
    for (std::size_t i = 0; i < cfg_.n_in; ++i) col(static_cast<Eigen::Index>(i), 0) = static_cast<Scalar>(x[i]);
    const Mat out = forward_batch(col, masks);
    if (!out.allFinite()) throw NumericError("non-finite network output");
    return out.col(0).template cast<double>();
  }

  MlpConfig cfg_;
  ModelParams<Scalar> params_;
};

/// Mean over samples of the squared L2 residual norm. Columns are samples.
template <class Scalar>
double loss(const Mlp<Scalar>& model, const Matrix<Scalar>& inputs, const Matrix<Scalar>& targets,
            const MaskSet<Scalar>& masks = {}) {
  if (inputs.cols() == 0) throw PreconditionError("loss: empty batch");
  if (targets.cols() != inputs.cols() || static_cast<std::size_t>(targets.rows()) != model.output_dim())
    throw ShapeError("loss: target shape mismatch");
  const Matrix<Scalar> out = model.forward_batch(inputs, masks);
  return (out - targets).template cast<double>().squaredNorm() / static_cast<double>(inputs.cols());
}

/// Reverse-mode gradient of the masked quadratic loss.
template <class Scalar>
struct GradientResult {
  ModelParams<Scalar> grad;
  double loss = 0.0;
};

template <class Scalar>
GradientResult<Scalar> gradients(const Mlp<Scalar>& model, const Matrix<Scalar>& inputs,
                                 const Matrix<Scalar>& targets, const MaskSet<Scalar>& masks = {}) {
  using Mat = Matrix<Scalar>;
  const auto& cfg = model.config();
  const auto& p = model.params();
  if (inputs.cols() == 0) throw PreconditionError("gradients: empty batch");
  if (targets.cols() != inputs.cols() || static_cast<std::size_t>(targets.rows()) != cfg.n_out)
    throw ShapeError("gradients: target shape mismatch");

  ForwardCache<Scalar> cache;
  model.forward_batch(inputs, masks, cache, true);
  const auto batch = static_cast<Scalar>(inputs.cols());
  const std::size_t L = cfg.layer_count();

  GradientResult<Scalar> res;
  res.grad = ModelParams<Scalar>::zeros(cfg);
  const Mat residual = cache.output - targets;
  res.loss = residual.template cast<double>().squaredNorm() / static_cast<double>(inputs.cols());

  Mat delta = (Scalar(2) / batch) * residual;
  if (cfg.output_floor) {
    const auto floor = static_cast<Scalar>(*cfg.output_floor);
    delta = (cache.raw_output.array() >= floor).select(delta, Scalar(0));
  }
  res.grad.weights[L - 1].noalias() = delta * cache.activations[L - 1].transpose();
  res.grad.biases[L - 1] = delta.rowwise().sum();
  Mat da = p.weights[L - 1].transpose() * delta;
  for (std::size_t l = L - 1; l-- > 0;) {
    Mat dpre = (cache.pre[l].array() > Scalar(0)).select(da, Scalar(0));
    res.grad.biases[l] = dpre.rowwise().sum();
    if (cfg.is_dropout_layer(l) && !masks.empty()) {
      const Mat& mask = masks[cfg.dropout_slot(l)];
      if (mask.cols() == 1)
        dpre.array().colwise() *= mask.col(0).array();
      else
        dpre.array() *= mask.array();
    }
    res.grad.weights[l].noalias() = dpre * cache.activations[l].transpose();
    if (l > 0) da = p.weights[l].transpose() * dpre;
  }
  if (!res.grad.all_finite()) throw NumericError("non-finite gradient");
  return res;
}

}  // namespace pdose::nn
