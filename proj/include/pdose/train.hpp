#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "pdose/error.hpp"
#include "pdose/mlp.hpp"
#include "pdose/random.hpp"

namespace pdose::nn {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 100;
  std::size_t batch_size = 0;  // 0: full batch up to 256 samples, else 64
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  bool standardize_inputs = true;
  bool init_output_bias = true;  // start the output bias at the mean target

  std::size_t effective_batch(std::size_t n) const {
    const std::size_t b = batch_size == 0 ? (n <= 256 ? n : 64) : batch_size;
    return std::min(b, n);
  }

  void validate(std::size_t n) const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw PreconditionError("learning rate must be >= 0");
    if (epochs < 1) throw PreconditionError("epochs must be >= 1");
    if (batch_size > n) throw PreconditionError("batch size exceeds dataset size");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0))
      throw PreconditionError("invalid AdamW moments");
    if (weight_decay < 0.0) throw PreconditionError("weight decay must be >= 0");
  }
};

/// Training pairs stored column-wise: inputs n_in x N, targets n_out x N.
template <class Scalar>
struct TrainingSet {
  Matrix<Scalar> inputs;
  Matrix<Scalar> targets;

  std::size_t size() const noexcept { return static_cast<std::size_t>(inputs.cols()); }
};

struct LossHistory {
  std::vector<double> epoch_loss;

  void write_csv(std::ostream& os) const {
    os << "epoch,loss\n";
    os.precision(10);
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) os << e + 1 << ',' << epoch_loss[e] << '\n';
  }
};

/// Decoupled weight-decay Adam.
template <class Scalar>
class AdamW {
 public:
  AdamW(const MlpConfig& cfg, const TrainConfig& tc)
      : tc_(tc), m_(ModelParams<Scalar>::zeros(cfg)), v_(ModelParams<Scalar>::zeros(cfg)) {}

  void step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grad) {
    ++t_;
    const double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
      update(params.weights[l], grad.weights[l], m_.weights[l], v_.weights[l], bc1, bc2);
      update(params.biases[l], grad.biases[l], m_.biases[l], v_.biases[l], bc1, bc2);
    }
  }

 private:
  template <class T>
  void update(T& theta, const T& g, T& m, T& v, double bc1, double bc2) const {
    const auto b1 = static_cast<Scalar>(tc_.beta1);
    const auto b2 = static_cast<Scalar>(tc_.beta2);
    const auto lr = static_cast<Scalar>(tc_.learning_rate);
    const auto decay = static_cast<Scalar>(1.0 - tc_.learning_rate * tc_.weight_decay);
    const auto step = static_cast<Scalar>(tc_.learning_rate / bc1);
    const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const auto eps = static_cast<Scalar>(tc_.epsilon);
    m = b1 * m + (Scalar(1) - b1) * g;
    v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
    if (lr == Scalar(0)) return;
    theta *= decay;
    theta.array() -= step * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }

  TrainConfig tc_;
  ModelParams<Scalar> m_, v_;
  std::size_t t_ = 0;
};

template <class Scalar>
void check_training_set(const TrainingSet<Scalar>& data, const MlpConfig& cfg) {
  if (data.size() == 0) throw PreconditionError("training set is empty");
  if (static_cast<std::size_t>(data.inputs.rows()) != cfg.n_in) throw ShapeError("training inputs do not match n_in");
  if (static_cast<std::size_t>(data.targets.rows()) != cfg.n_out || data.targets.cols() != data.inputs.cols())
    throw ShapeError("training targets do not match n_out");
}

/// Network state before the first update: He-normal weights, input
/// standardisation fitted to the data and, optionally, the output bias at the
/// mean target.
template <class Scalar>
Mlp<Scalar> make_initial_model(const TrainingSet<Scalar>& data, const MlpConfig& cfg, const TrainConfig& tc) {
  cfg.validate();
  check_training_set(data, cfg);
  auto params = init_params<Scalar>(cfg, split_seed(tc.seed, 0));
  if (tc.standardize_inputs) {
    const auto n = static_cast<double>(data.size());
    for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
      const auto row = data.inputs.row(i).template cast<double>();
      const double mean = row.sum() / n;
      const double var = (row.array() - mean).square().sum() / n;
      params.input_shift(i) = static_cast<Scalar>(mean);
      params.input_scale(i) = static_cast<Scalar>(var > 0.0 ? std::sqrt(var) : 1.0);
    }
  }
  if (tc.init_output_bias) params.biases.back() = data.targets.rowwise().mean();
  return Mlp<Scalar>(cfg, std::move(params));
}

template <class Scalar>
struct TrainResult {
  Mlp<Scalar> model;
  LossHistory history;
};

/// Minibatch AdamW on the quadratic loss with one fresh set of dropout masks
/// per minibatch.
template <class Scalar>
TrainResult<Scalar> train(const TrainingSet<Scalar>& data, const MlpConfig& cfg, const TrainConfig& tc) {
  tc.validate(data.size());
  Mlp<Scalar> model = make_initial_model(data, cfg, tc);
  AdamW<Scalar> opt(cfg, tc);

  const std::size_t n = data.size();
  const std::size_t batch = tc.effective_batch(n);
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto shuffle_rng = make_rng(split_seed(tc.seed, 1));
  const std::uint64_t mask_stream = split_seed(tc.seed, 2);
  const bool use_masks = cfg.dropout_layers > 0 && cfg.p_drop > 0.0;

  TrainResult<Scalar> result{model, {}};
  Matrix<Scalar> xb, db;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    if (batch < n) std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      if (len == n) {
        xb = data.inputs;
        db = data.targets;
      } else {
        xb.resize(data.inputs.rows(), static_cast<Eigen::Index>(len));
        db.resize(data.targets.rows(), static_cast<Eigen::Index>(len));
        for (std::size_t k = 0; k < len; ++k) {
          xb.col(static_cast<Eigen::Index>(k)) = data.inputs.col(order[start + k]);
          db.col(static_cast<Eigen::Index>(k)) = data.targets.col(order[start + k]);
        }
      }
      MaskSet<Scalar> masks;
      if (use_masks) masks = masks_for_seed<Scalar>(cfg, split_seed(mask_stream, step));
      ++step;
      GradientResult<Scalar> g;
      try {
        g = gradients(result.model, xb, db, masks);
      } catch (const NumericError&) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1), epoch + 1);
      }
      if (!std::isfinite(g.loss))
        throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1), epoch + 1);
      total += g.loss * static_cast<double>(len);
      opt.step(result.model.mutable_params(), g.grad);
    }
    const double epoch_loss = total / static_cast<double>(n);
    if (!std::isfinite(epoch_loss) || !result.model.params().all_finite())
      throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1), epoch + 1);
    result.history.epoch_loss.push_back(epoch_loss);
  }
  return result;
}

}  // namespace pdose::nn
