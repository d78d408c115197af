#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "waam/control.hpp"
#include "waam/datagen.hpp"
#include "waam/gradcheck.hpp"
#include "waam/training.hpp"

using namespace waam;

namespace {

LayerTrace trace_from_model(const ModelParams& p, int len, std::uint64_t seed, int layer = 1) {
  Rng rng(seed);
  LayerTrace tr;
  tr.layer_index = layer;
  std::vector<ProcessInput> u;
  for (int k = 0; k < len; ++k) u.push_back({rng.uniform(3.0, 12.0), rng.uniform(30.0, 90.0)});
  const auto y = rollout(p, u);
  for (int k = 0; k < len; ++k) tr.samples.push_back({0.1 * k, 0.75 * k, u[k], y[k]});
  return tr;
}

ModelParams normalized_teacher(Arch a, int n, std::uint64_t seed) {
  auto p = model_init(a, n, seed);
  p.norm().u_mean = {7.5, 60.0};
  p.norm().u_std = {3.0, 20.0};
  p.norm().y_mean = {1.8, 5.2};
  p.norm().y_std = {0.3, 0.6};
  return p;
}

std::vector<LayerTrace> numbered_traces(int count) {
  std::vector<LayerTrace> v(count);
  for (int i = 0; i < count; ++i) v[i].layer_index = i + 1;
  return v;
}

}  // namespace

TEST(SplitDataset, EightyTwentyOfTen) {
  const auto ds = split_dataset(numbered_traces(10), 0.8, 1);
  EXPECT_EQ(ds.train().size(), 8u);
  EXPECT_EQ(ds.validation().size(), 2u);
}

TEST(SplitDataset, SeededAndPartitioning) {
  const auto a = split_dataset(numbered_traces(23), 0.8, 9);
  const auto b = split_dataset(numbered_traces(23), 0.8, 9);
  EXPECT_EQ(a.split, b.split);
  std::multiset<int> seen;
  for (const auto& t : a.train()) seen.insert(t.layer_index);
  for (const auto& t : a.validation()) seen.insert(t.layer_index);
  std::multiset<int> all;
  for (int i = 1; i <= 23; ++i) all.insert(i);
  EXPECT_EQ(seen, all);
}

TEST(SplitDataset, AlwaysHoldsOutOne) {
  const auto ds = split_dataset(numbered_traces(2), 0.99, 0);
  EXPECT_EQ(ds.validation().size(), 1u);
  EXPECT_THROW(split_dataset(numbered_traces(1), 0.8, 0), Error);
}

TEST(Loss, ExactModelHasZeroLossAndGradient) {
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) {
    const auto p = normalized_teacher(a, 5, 3);
    const std::vector<LayerTrace> data{trace_from_model(p, 20, 1), trace_from_model(p, 15, 2)};
    const auto lg = loss_and_gradients(p, std::span<const LayerTrace>(data));
    EXPECT_LT(lg.loss, 1e-28) << to_string(a);
    EXPECT_LT(lg.grad.cwiseAbs().maxCoeff(), 1e-13) << to_string(a);
  }
}

TEST(Loss, GradientMatchesFiniteDifferencesOnToySet) {
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) {
    const auto teacher = normalized_teacher(a, 4, 5);
    const std::vector<LayerTrace> data{trace_from_model(teacher, 20, 6), trace_from_model(teacher, 20, 7)};
    auto p = normalized_teacher(a, 4, 99);
    const auto analytic = loss_and_gradients(p, std::span<const LayerTrace>(data)).grad;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      const double keep = p.theta()[i];
      const double fd = central_difference(
          [&](double v) {
            p.theta()[i] = v;
            return loss_and_gradients(p, std::span<const LayerTrace>(data), false).loss;
          },
          keep, 1e-4);
      p.theta()[i] = keep;
      worst = std::max(worst, relative_error(analytic[i], fd, 1e-6));
    }
    EXPECT_LE(worst, 1e-4) << to_string(a);
  }
}

TEST(Loss, TruncatedGradientMatchesChunkedOracle) {
  // with truncation T, the gradient equals the sum over chunks where each
  // chunk's backward pass starts from zero
  const auto teacher = normalized_teacher(Arch::rnn, 3, 5);
  const auto tr = trace_from_model(teacher, 12, 6);
  const auto p = normalized_teacher(Arch::rnn, 3, 8);
  const std::vector<LayerTrace> data{tr};
  const auto full = loss_and_gradients(p, std::span<const LayerTrace>(data), true, 0);
  const auto cut = loss_and_gradients(p, std::span<const LayerTrace>(data), true, 12);
  EXPECT_LT((full.grad - cut.grad).cwiseAbs().maxCoeff(), 1e-15);
  const auto chunked = loss_and_gradients(p, std::span<const LayerTrace>(data), true, 4);
  EXPECT_EQ(chunked.loss, full.loss);
  EXPECT_GT((full.grad - chunked.grad).norm(), 0.0);
}

TEST(Loss, DuplicatingTracesKeepsMse) {
  const auto teacher = normalized_teacher(Arch::gru, 4, 5);
  const auto p = normalized_teacher(Arch::gru, 4, 6);
  std::vector<LayerTrace> data{trace_from_model(teacher, 20, 1), trace_from_model(teacher, 11, 2)};
  const double once = loss_and_gradients(p, std::span<const LayerTrace>(data), false).loss;
  auto twice = data;
  twice.insert(twice.end(), data.begin(), data.end());
  EXPECT_NEAR(loss_and_gradients(p, std::span<const LayerTrace>(twice), false).loss, once, 1e-15 * once);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Eigen::VectorXd theta = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  const Eigen::VectorXd keep = theta;
  AdamState st = AdamState::zeros(5);
  for (int i = 0; i < 3; ++i) adam_step(theta, Eigen::VectorXd::Zero(5), st, AdamConfig{});
  EXPECT_EQ(theta, keep);
}

TEST(Adam, FirstStepMagnitude) {
  AdamConfig cfg;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(3);
  const Eigen::Vector3d g(0.5, -2.0, 1e-3);
  AdamState st = AdamState::zeros(3);
  adam_step(theta, g, st, cfg);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(theta[i], -cfg.learning_rate * g[i] / (std::abs(g[i]) + cfg.epsilon), 1e-15);
}

TEST(Adam, OppositeSignsMoveEqually) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
  AdamState st = AdamState::zeros(2);
  for (int i = 0; i < 10; ++i) adam_step(theta, Eigen::Vector2d(0.7, -0.7), st, AdamConfig{});
  EXPECT_EQ(theta[0], -theta[1]);
}

TEST(Train, BitReproducibleAndCheckpointsBest) {
  const auto teacher = normalized_teacher(Arch::rnn, 4, 1);
  std::vector<LayerTrace> data;
  for (int i = 0; i < 6; ++i) data.push_back(trace_from_model(teacher, 40, 10 + i, i + 1));
  const auto ds = split_dataset(data, 0.8, 0);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.seed = 4;
  const auto a = train(Arch::rnn, 4, ds, cfg);
  const auto b = train(Arch::rnn, 4, ds, cfg);
  EXPECT_EQ(a.params, b.params);
  ASSERT_EQ(a.history.size(), b.history.size());
  double best = 1e300;
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].val_mse, b.history[i].val_mse);
    best = std::min(best, a.history[i].val_mse);
  }
  EXPECT_EQ(a.best_val_mse, best);
  const auto val = ds.validation();
  EXPECT_EQ(loss_and_gradients(a.params, std::span<const LayerTrace>(val), false).loss, a.best_val_mse);
  EXPECT_LT(a.best_val_mse, a.history.front().val_mse);
}

TEST(Train, MiniBatchAndTruncationRun) {
  const auto teacher = normalized_teacher(Arch::lstm, 3, 1);
  std::vector<LayerTrace> data;
  for (int i = 0; i < 8; ++i) data.push_back(trace_from_model(teacher, 30, 20 + i, i + 1));
  const auto ds = split_dataset(data, 0.75, 2);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 2;
  cfg.truncation = 10;
  const auto r = train(Arch::lstm, 3, ds, cfg);
  EXPECT_FALSE(r.diverged);
  EXPECT_LE(r.best_val_mse, r.history.front().val_mse);
}

TEST(Train, RejectsBadConfig) {
  const auto ds = split_dataset(numbered_traces(4), 0.5, 0);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(Arch::rnn, 3, ds, cfg), Error);
}

TEST(EvaluateErrors, PerfectModel) {
  const auto p = normalized_teacher(Arch::gru, 4, 2);
  const std::vector<LayerTrace> data{trace_from_model(p, 30, 1), trace_from_model(p, 30, 2)};
  const auto e = evaluate_errors(p, data);
  EXPECT_EQ(e.mae, Eigen::Vector2d::Zero());
  EXPECT_EQ(e.p95, Eigen::Vector2d::Zero());
  EXPECT_EQ(e.count, 60u);
}

TEST(EvaluateErrors, ConstantOffset) {
  const auto p = normalized_teacher(Arch::rnn, 4, 2);
  const std::vector<LayerTrace> data{trace_from_model(p, 30, 1)};
  auto shifted = p;
  shifted.norm().y_mean[0] += 0.1;
  const auto e = evaluate_errors(shifted, data);
  EXPECT_NEAR(e.mae[0], 0.1, 1e-12);
  EXPECT_NEAR(e.p95[0], 0.1, 1e-12);
  EXPECT_NEAR(e.mae[1], 0.0, 1e-12);
}

TEST(EvaluateErrors, NearestRankMatchesSortOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + rng.below(300));
    for (auto& x : v) x = rng.uniform(0.0, 5.0);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    // smallest value with at least 95% of the sample at or below it
    double oracle = sorted.back();
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (100 * (i + 1) >= 95 * sorted.size()) {
        oracle = sorted[i];
        break;
      }
    EXPECT_EQ(nearest_rank_percentile(v, 0.95), oracle);
  }
}

namespace {

struct PlantFixture {
  ModelParams model;
  LayerTrace layer;
};

PlantFixture small_plant_model() {
  const PlantConfig pc;
  auto spec = CoverageSpec::even(5, 2);
  const auto builds = generate_builds(pc, spec, 3);
  std::vector<LayerTrace> all;
  for (const auto& b : builds)
    for (const auto& l : b) all.push_back(l);
  const auto ds = split_dataset(all, 0.8, 0);
  TrainConfig cfg;
  cfg.epochs = 150;
  auto r = train(Arch::rnn, 6, ds, cfg);
  PlantState st = PlantState::initial(pc);
  for (int i = 0; i < 4; ++i) {
    run_layer(st, pc, InputSource{kNominalInput});
    interlayer_wait(st, pc, 45.0);
  }
  return {r.params, run_layer(st, pc, InputSource{kNominalInput})};
}

}  // namespace

TEST(FineTune, HugeLambdaReturnsStart) {
  const auto fx = small_plant_model();
  FineTuneConfig cfg;
  cfg.lambda = 1e9;
  cfg.epochs = 50;
  const auto r = fine_tune(fx.model, fx.layer, cfg);
  const double rel = (r.params.theta() - fx.model.theta()).norm() / fx.model.theta().norm();
  EXPECT_LE(rel, 1e-6);
}

TEST(FineTune, ZeroLambdaIsPlainMse) {
  const auto fx = small_plant_model();
  FineTuneConfig cfg;
  cfg.lambda = 0.0;
  cfg.epochs = 40;
  const auto r = fine_tune(fx.model, fx.layer, cfg);
  const std::vector<LayerTrace> one{fx.layer};
  const double mse = loss_and_gradients(r.params, std::span<const LayerTrace>(one), false).loss;
  EXPECT_EQ(r.loss, mse);
  EXPECT_LT(mse, loss_and_gradients(fx.model, std::span<const LayerTrace>(one), false).loss);
}

TEST(FineTune, ImprovesFitOnTheLayer) {
  const auto fx = small_plant_model();
  const auto r = fine_tune(fx.model, fx.layer, FineTuneConfig{});
  const std::vector<LayerTrace> one{fx.layer};
  const double start = loss_and_gradients(fx.model, std::span<const LayerTrace>(one), false).loss;
  const double end = loss_and_gradients(r.params, std::span<const LayerTrace>(one), false).loss;
  const double drift = (r.params.theta() - fx.model.theta()).squaredNorm();
  EXPECT_NEAR(r.loss, end + FineTuneConfig{}.lambda * drift, 1e-12 * r.loss);
  EXPECT_LE(r.loss, start);
  EXPECT_LT(end, start);
  EXPECT_EQ(r.params.norm(), fx.model.norm());
}
