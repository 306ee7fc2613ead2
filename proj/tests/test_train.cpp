#include <gtest/gtest.h>

#include <sstream>

#include "pdose/dataset.hpp"
#include "pdose/train.hpp"

using namespace pdose;
using namespace pdose::nn;

namespace {

TrainingSet<double> linear_set(std::size_t n) {
  TrainingSet<double> s;
  s.inputs = Matrix<double>::Random(2, static_cast<Eigen::Index>(n));
  Matrix<double> a(3, 2);
  a << 1.0, -2.0, 0.5, 0.25, -1.0, 3.0;
  s.targets = a * s.inputs;
  return s;
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  const auto data = linear_set(16);
  MlpConfig c{2, 8, 1, 1, 3, 0.1};
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 5;
  tc.seed = 3;
  const auto initial = make_initial_model(data, c, tc);
  const auto res = train(data, c, tc);
  EXPECT_TRUE(res.model.params() == initial.params());
  EXPECT_EQ(res.history.epoch_loss.size(), 5u);
}

TEST(Train, FitsLinearTarget) {
  const auto data = linear_set(64);
  MlpConfig c{2, 32, 1, 0, 3, 0.0};
  TrainConfig tc;
  tc.learning_rate = 2e-4;
  tc.epochs = 40000;
  tc.weight_decay = 0.0;
  tc.seed = 1;
  const auto res = train(data, c, tc);
  EXPECT_LT(res.history.epoch_loss.back(), 1e-6);
  EXPECT_LT(loss(res.model, data.inputs, data.targets), 1e-6);
}

TEST(Train, ReproducibleHistory) {
  const auto data = linear_set(40);
  MlpConfig c{2, 16, 2, 2, 3, 0.1};
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  tc.seed = 7;
  const auto a = train(data, c, tc);
  const auto b = train(data, c, tc);
  EXPECT_EQ(a.history.epoch_loss, b.history.epoch_loss);
  EXPECT_TRUE(a.model.params() == b.model.params());
  tc.seed = 8;
  EXPECT_NE(train(data, c, tc).history.epoch_loss, a.history.epoch_loss);
}

TEST(Train, StepsPerEpochAndBatchRule) {
  TrainConfig tc;
  EXPECT_EQ(tc.effective_batch(200), 200u);
  EXPECT_EQ(tc.effective_batch(257), 64u);
  tc.batch_size = 10;
  EXPECT_EQ(tc.effective_batch(4), 4u);
  EXPECT_THROW(tc.validate(4), PreconditionError);
  tc.batch_size = 0;
  tc.epochs = 0;
  EXPECT_THROW(tc.validate(4), PreconditionError);
}

TEST(Train, DivergenceReportsEpoch) {
  auto data = linear_set(8);
  data.targets *= 1e200;
  MlpConfig c{2, 8, 1, 0, 3, 0.0};
  TrainConfig tc;
  tc.learning_rate = 1e3;
  tc.epochs = 50;
  tc.init_output_bias = false;
  try {
    train(data, c, tc);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.epoch(), 1u);
  }
}

TEST(Train, RejectsInconsistentData) {
  auto data = linear_set(8);
  MlpConfig c{2, 8, 1, 0, 4, 0.0};
  EXPECT_THROW(train(data, c, TrainConfig{}), ShapeError);
  TrainingSet<double> empty;
  empty.inputs.resize(2, 0);
  empty.targets.resize(3, 0);
  EXPECT_THROW(train(empty, MlpConfig{2, 8, 1, 0, 3, 0.0}, TrainConfig{}), PreconditionError);
}

TEST(Train, LossCsv) {
  LossHistory h{{3.0, 2.0}};
  std::ostringstream os;
  h.write_csv(os);
  EXPECT_EQ(os.str(), "epoch,loss\n1,3\n2,2\n");
}

TEST(Train, DeskOneDLossDrop) {
  const auto ds = generate_1d(200, Generator1D{}, 5);
  MlpConfig c{4, 128, 3, 3, 400, 0.05};
  TrainConfig tc;
  tc.epochs = 500;
  tc.batch_size = 32;
  tc.seed = 2;
  const auto res = train(ds.training_set(ds.all_indices()), c, tc);
  EXPECT_LT(res.history.epoch_loss.back(), res.history.epoch_loss.front() / 10.0);
}
