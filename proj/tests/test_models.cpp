#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <vector>

#include "waam/gradcheck.hpp"
#include "waam/loglog.hpp"
#include "waam/models.hpp"
#include "waam/plant.hpp"

using namespace waam;

namespace {

// plain nested-loop access to a named block
struct Mat {
  const ModelParams* p;
  Block b;
  double operator()(Eigen::Index r, Eigen::Index c) const { return p->theta()[b.offset + r * b.cols + c]; }
};
Mat mat(const ModelParams& p, const char* name) { return {&p, p.block(name)}; }

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

ModelParams random_params(Arch arch, int n, std::uint64_t seed) {
  auto p = model_init(arch, n, seed);
  Rng rng(seed + 1);
  for (Eigen::Index i = 0; i < p.theta().size(); ++i) p.theta()[i] += rng.uniform(-0.3, 0.3);
  return p;
}

std::vector<Eigen::Vector2d> random_inputs(int len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Eigen::Vector2d> u;
  for (int k = 0; k < len; ++k) u.emplace_back(rng.normal(), rng.normal());
  return u;
}

std::vector<Eigen::Vector2d> run_model(const ModelParams& p, const std::vector<Eigen::Vector2d>& u) {
  ModelState st = ModelState::zero(p);
  std::vector<Eigen::Vector2d> y;
  for (const auto& uk : u) y.push_back(model_step(p, st, uk));
  return y;
}

}  // namespace

TEST(ModelInit, Deterministic) {
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) EXPECT_EQ(model_init(a, 8, 3), model_init(a, 8, 3));
  EXPECT_NE(model_init(Arch::rnn, 8, 3), model_init(Arch::rnn, 8, 4));
}

TEST(ModelInit, RnnShapes) {
  const auto p = model_init(Arch::rnn, 16, 0);
  EXPECT_EQ(p.block("W_hh").rows, 16);
  EXPECT_EQ(p.block("W_hh").cols, 16);
  EXPECT_EQ(p.block("W_ih").rows, 16);
  EXPECT_EQ(p.block("W_ih").cols, 2);
  EXPECT_EQ(p.block("W_ho").rows, 2);
  EXPECT_EQ(p.block("W_ho").cols, 16);
}

TEST(ModelInit, NarxRegressorLength) {
  const auto p = model_init(Arch::narx, 8, 0);
  EXPECT_EQ(p.block("W_1").cols, 8 * (2 + 2));
  EXPECT_EQ(p.block("W_1").rows, kNarxHidden);
  EXPECT_EQ(p.state_dim(), 4 * 8 - 2);
}

TEST(ModelInit, RejectsLoglog) { EXPECT_THROW(model_init(Arch::loglog, 3, 0), Error); }

TEST(ModelStep, ZeroWeightsGiveZeroOutput) {
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) {
    const auto p = ModelParams::zeros(a, 5);
    ModelState st = ModelState::zero(p);
    for (int k = 0; k < 4; ++k) EXPECT_EQ(model_step(p, st, Eigen::Vector2d(3.0, -7.0)), Eigen::Vector2d::Zero());
  }
}

TEST(ModelStep, RnnHiddenStaysInsideUnitBox) {
  const auto p = random_params(Arch::rnn, 8, 2);
  ModelState st = ModelState::zero(p);
  Rng rng(9);
  for (int k = 0; k < 500; ++k) {
    model_step(p, st, Eigen::Vector2d(rng.uniform(-50, 50), rng.uniform(-50, 50)));
    EXPECT_LE(st.x.cwiseAbs().maxCoeff(), 1.0);
  }
}

TEST(ModelStep, RnnMatchesTranscription) {
  const int n = 3;
  const auto p = random_params(Arch::rnn, n, 21);
  const auto u = random_inputs(5, 22);
  const auto wih = mat(p, "W_ih"), whh = mat(p, "W_hh"), bh = mat(p, "b_h"), who = mat(p, "W_ho"), bo = mat(p, "b_o");
  std::vector<double> h(n, 0.0);
  const auto got = run_model(p, u);
  for (std::size_t k = 0; k < u.size(); ++k) {
    std::vector<double> hn(n);
    for (int i = 0; i < n; ++i) {
      double z = bh(i, 0) + wih(i, 0) * u[k][0] + wih(i, 1) * u[k][1];
      for (int j = 0; j < n; ++j) z += whh(i, j) * h[j];
      hn[i] = std::tanh(z);
    }
    h = hn;
    for (int o = 0; o < 2; ++o) {
      double y = bo(o, 0);
      for (int j = 0; j < n; ++j) y += who(o, j) * h[j];
      EXPECT_NEAR(got[k][o], y, 1e-12);
    }
  }
}

TEST(ModelStep, LstmMatchesTranscription) {
  const int n = 3;
  const auto p = random_params(Arch::lstm, n, 31);
  const auto u = random_inputs(6, 32);
  const auto wi = mat(p, "W_i"), wh = mat(p, "W_h"), b = mat(p, "b"), wy = mat(p, "W_yh"), by = mat(p, "b_y");
  std::vector<double> h(n, 0.0), c(n, 0.0);
  const auto got = run_model(p, u);
  for (std::size_t k = 0; k < u.size(); ++k) {
    auto pre = [&](int row) {
      double z = b(row, 0) + wi(row, 0) * u[k][0] + wi(row, 1) * u[k][1];
      for (int j = 0; j < n; ++j) z += wh(row, j) * h[j];
      return z;
    };
    std::vector<double> hn(n), cn(n);
    for (int i = 0; i < n; ++i) {
      const double ig = sig(pre(i)), fg = sig(pre(n + i)), g = std::tanh(pre(2 * n + i)), og = sig(pre(3 * n + i));
      cn[i] = fg * c[i] + ig * g;
      hn[i] = og * std::tanh(cn[i]);
    }
    h = hn;
    c = cn;
    for (int o = 0; o < 2; ++o) {
      double y = by(o, 0);
      for (int j = 0; j < n; ++j) y += wy(o, j) * h[j];
      EXPECT_NEAR(got[k][o], y, 1e-12);
    }
  }
}

TEST(ModelStep, GruMatchesTranscription) {
  const int n = 4;
  const auto p = random_params(Arch::gru, n, 41);
  const auto u = random_inputs(6, 42);
  const auto wi = mat(p, "W_i"), wh = mat(p, "W_h"), b = mat(p, "b"), wy = mat(p, "W_yh"), by = mat(p, "b_y");
  std::vector<double> h(n, 0.0);
  const auto got = run_model(p, u);
  for (std::size_t k = 0; k < u.size(); ++k) {
    auto in = [&](int row) { return b(row, 0) + wi(row, 0) * u[k][0] + wi(row, 1) * u[k][1]; };
    std::vector<double> z(n), r(n), hn(n);
    for (int i = 0; i < n; ++i) {
      double az = in(i), ar = in(n + i);
      for (int j = 0; j < n; ++j) {
        az += wh(i, j) * h[j];
        ar += wh(n + i, j) * h[j];
      }
      z[i] = sig(az);
      r[i] = sig(ar);
    }
    for (int i = 0; i < n; ++i) {
      double ac = in(2 * n + i);
      for (int j = 0; j < n; ++j) ac += wh(2 * n + i, j) * r[j] * h[j];
      hn[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(ac);
    }
    h = hn;
    for (int o = 0; o < 2; ++o) {
      double y = by(o, 0);
      for (int j = 0; j < n; ++j) y += wy(o, j) * h[j];
      EXPECT_NEAR(got[k][o], y, 1e-12);
    }
  }
}

TEST(ModelStep, NarxMatchesTranscription) {
  const int n = 3;
  const auto p = random_params(Arch::narx, n, 51);
  const auto u = random_inputs(7, 52);
  const auto w1 = mat(p, "W_1"), b1 = mat(p, "b_1"), w2 = mat(p, "W_2"), b2 = mat(p, "b_2"), w3 = mat(p, "W_3"),
             b3 = mat(p, "b_3");
  const int hid = kNarxHidden;
  std::deque<Eigen::Vector2d> ys(n, Eigen::Vector2d::Zero()), us(n - 1, Eigen::Vector2d::Zero());  // most recent first
  const auto got = run_model(p, u);
  for (std::size_t k = 0; k < u.size(); ++k) {
    std::vector<double> phi;
    for (const auto& y : ys) phi.insert(phi.end(), {y[0], y[1]});
    phi.insert(phi.end(), {u[k][0], u[k][1]});
    for (const auto& v : us) phi.insert(phi.end(), {v[0], v[1]});
    ASSERT_EQ(static_cast<int>(phi.size()), 4 * n);
    std::vector<double> a1(hid), a2(hid);
    for (int i = 0; i < hid; ++i) {
      double z = b1(i, 0);
      for (int j = 0; j < 4 * n; ++j) z += w1(i, j) * phi[j];
      a1[i] = std::tanh(z);
    }
    for (int i = 0; i < hid; ++i) {
      double z = b2(i, 0);
      for (int j = 0; j < hid; ++j) z += w2(i, j) * a1[j];
      a2[i] = std::tanh(z);
    }
    Eigen::Vector2d y;
    for (int o = 0; o < 2; ++o) {
      y[o] = b3(o, 0);
      for (int j = 0; j < hid; ++j) y[o] += w3(o, j) * a2[j];
      EXPECT_NEAR(got[k][o], y[o], 1e-12);
    }
    ys.push_front(y);
    ys.pop_back();
    us.push_front(u[k]);
    us.pop_back();
  }
}

TEST(Rollout, EmptyInput) {
  const auto p = model_init(Arch::gru, 4, 0);
  EXPECT_TRUE(rollout(p, std::vector<ProcessInput>{}).empty());
}

TEST(Rollout, EqualsManualChaining) {
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) {
    auto p = random_params(a, 5, 7);
    p.norm().u_mean = {7.0, 60.0};
    p.norm().u_std = {3.0, 20.0};
    p.norm().y_mean = {1.8, 5.2};
    p.norm().y_std = {0.4, 0.9};
    std::vector<ProcessInput> u;
    Rng rng(1);
    for (int k = 0; k < 30; ++k) u.push_back({rng.uniform(2, 15), rng.uniform(21.2, 105.8)});
    const auto y = rollout(p, u);
    ModelState st = ModelState::zero(p);
    for (std::size_t k = 0; k < u.size(); ++k) {
      const auto yk = p.norm().denormalize_y(model_step(p, st, p.norm().normalize_u(u[k])));
      EXPECT_EQ(y[k], yk);
    }
  }
}

TEST(InputJacobian, ZeroInputWeightsGiveZero) {
  auto p = random_params(Arch::rnn, 4, 3);
  p.view(0).setZero();
  const auto st = random_grad_instance(Arch::rnn, 4, 1).state;
  EXPECT_EQ(input_jacobian(p, st, kNominalInput), Eigen::Matrix2d::Zero());
}

TEST(InputJacobian, RnnChainRule) {
  auto p = random_params(Arch::rnn, 6, 8);
  p.norm().u_mean = {7.0, 60.0};
  p.norm().u_std = {3.0, 20.0};
  p.norm().y_mean = {1.8, 5.2};
  p.norm().y_std = {0.4, 0.9};
  ModelState st = ModelState::zero(p);
  for (int i = 0; i < 6; ++i) st.x[i] = 0.1 * i - 0.25;
  const ProcessInput u{6.0, 55.0};
  // C diag(1 - tanh^2 z) W_ih, then scaled to physical units
  const auto wih = mat(p, "W_ih"), whh = mat(p, "W_hh"), bh = mat(p, "b_h"), who = mat(p, "W_ho");
  const Eigen::Vector2d un = p.norm().normalize_u(u);
  Eigen::Matrix2d oracle = Eigen::Matrix2d::Zero();
  for (int i = 0; i < 6; ++i) {
    double z = bh(i, 0) + wih(i, 0) * un[0] + wih(i, 1) * un[1];
    for (int j = 0; j < 6; ++j) z += whh(i, j) * st.x[j];
    const double d = 1.0 - std::tanh(z) * std::tanh(z);
    for (int o = 0; o < 2; ++o)
      for (int c = 0; c < 2; ++c) oracle(o, c) += who(o, i) * d * wih(i, c);
  }
  for (int o = 0; o < 2; ++o)
    for (int c = 0; c < 2; ++c) oracle(o, c) *= p.norm().y_std[o] / p.norm().u_std[c];
  EXPECT_LT((input_jacobian(p, st, u) - oracle).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(InputJacobian, FiniteDifferencesOnHundredPointsPerArch) {
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) {
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto inst = random_grad_instance(a, 3 + i % 6, 1000 + i);
      const auto r = check_instance(inst);
      worst = std::max({worst, r.jacobian_error, r.state_error});
    }
    EXPECT_LE(worst, 1e-4) << to_string(a);
  }
}

TEST(StateMatrix, ZeroRecurrentWeights) {
  auto p = random_params(Arch::rnn, 5, 3);
  p.view(1).setZero();
  const auto a = state_matrix(p, ModelState::zero(p), kNominalInput);
  EXPECT_EQ(a, Eigen::MatrixXd::Zero(5, 5));
}

TEST(StateMatrix, SaturatedRnnHasNearZeroA) {
  auto p = random_params(Arch::rnn, 5, 3);
  p.view(2).setConstant(60.0);  // huge bias drives every unit into saturation
  const auto a = state_matrix(p, ModelState::zero(p), kNominalInput);
  EXPECT_LT(a.cwiseAbs().maxCoeff(), 1e-20);
}

TEST(StateMatrix, NarxUnsupported) {
  const auto p = model_init(Arch::narx, 3, 0);
  EXPECT_THROW(state_matrix(p, ModelState::zero(p), kNominalInput), Error);
}

namespace {

std::vector<IOSample> power_law_samples(const LogLogModel& m, int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<IOSample> s;
  for (int i = 0; i < count; ++i) {
    const ProcessInput u{rng.uniform(2.0, 15.0), rng.uniform(21.2, 105.8)};
    s.push_back({u, loglog_predict(m, u)});
  }
  return s;
}

}  // namespace

TEST(LoglogFit, RecoversExactExponents) {
  LogLogModel truth;
  truth.alpha = {-1.0, 1.0, 0.5};
  truth.beta = {-0.3, 0.4, 0.9};
  const auto s = power_law_samples(truth, 200, 3);
  const auto fit = loglog_fit(s);
  EXPECT_LT((fit.alpha - truth.alpha).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((fit.beta - truth.beta).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LoglogFit, DuplicatesDoNotChangeFit) {
  Rng rng(4);
  std::vector<IOSample> s;
  for (int i = 0; i < 50; ++i)
    s.push_back({{rng.uniform(2, 15), rng.uniform(21, 105)}, {rng.uniform(1, 3), rng.uniform(4, 7)}});
  auto doubled = s;
  doubled.insert(doubled.end(), s.begin(), s.end());
  const auto a = loglog_fit(s), b = loglog_fit(doubled);
  EXPECT_LT((a.alpha - b.alpha).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.beta - b.beta).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LoglogFit, ResidualsOrthogonalToDesign) {
  Rng rng(5);
  std::vector<IOSample> s;
  for (int i = 0; i < 80; ++i)
    s.push_back({{rng.uniform(2, 15), rng.uniform(21, 105)}, {rng.uniform(1, 3), rng.uniform(4, 7)}});
  const auto fit = loglog_fit(s);
  Eigen::MatrixXd x(80, 3);
  Eigen::VectorXd r(80);
  for (int i = 0; i < 80; ++i) {
    x.row(i) << std::log(s[i].u.v_t), std::log(s[i].u.v_w), 1.0;
    r[i] = std::log(s[i].y.delta_h) - x.row(i).dot(fit.alpha);
  }
  EXPECT_LE((x.transpose() * r).norm(), 1e-8 * x.norm() * r.norm());
}

TEST(LoglogFit, DegenerateDesignRejected) {
  std::vector<IOSample> s(10, IOSample{{7.5, 63.5}, {1.8, 5.2}});
  EXPECT_THROW(loglog_fit(s), Error);
  EXPECT_THROW(loglog_fit(std::span<const IOSample>(s.data(), 2)), Error);
}

TEST(LoglogInvert, RoundTrip) {
  LogLogModel m;
  m.alpha = {-0.8, 0.9, -0.2};
  m.beta = {-0.2, 0.5, 0.1};
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const ProcessInput u{rng.uniform(3, 14), rng.uniform(25, 100)};
    const auto back = loglog_invert(m, loglog_predict(m, u));
    EXPECT_NEAR(back.v_t, u.v_t, 1e-9);
    EXPECT_NEAR(back.v_w, u.v_w, 1e-9);
  }
}

TEST(LoglogInvert, SeparableSingularCase) {
  LogLogModel m;
  m.alpha = {-1.0, 1.0, 0.0};
  m.beta = {0.0, 0.0, std::log(5.2)};
  for (double dh : {5.0, 8.5, 14.0}) {
    const auto u = loglog_invert(m, {dh, 5.2});
    EXPECT_NEAR(u.v_w / u.v_t, dh, 1e-9);
  }
  EXPECT_THROW(loglog_invert(m, {1.8, 6.0}), Error);
}

TEST(LoglogInvert, NominalTargetNearGridOptimum) {
  // fit on the noise-free steady-state plant map, then compare with a grid search
  const PlantConfig cfg;
  Rng rng(8);
  std::vector<IOSample> samples;
  for (int i = 0; i < 400; ++i) {
    const ProcessInput u{rng.uniform(2.0, 15.0), rng.uniform(21.2, 105.8)};
    if (u.vpd() < 5.0 || u.vpd() > 14.0) continue;
    samples.push_back({u, bead_geometry(cfg, steady_temperature(cfg, u.v_w, 1), u)});
  }
  const auto fit = loglog_fit(samples);
  const ProcessOutput target{1.8, 5.2};
  const auto u = loglog_invert(fit, target);
  InputBounds box;
  EXPECT_TRUE(box.contains(u));
  double best = 1e300;
  ProcessInput best_u;
  for (int i = 0; i <= 400; ++i)
    for (int j = 0; j <= 400; ++j) {
      const ProcessInput g{box.lo.v_t + (box.hi.v_t - box.lo.v_t) * i / 400.0, box.lo.v_w + (box.hi.v_w - box.lo.v_w) * j / 400.0};
      const auto y = loglog_predict(fit, g);
      const double e = std::pow(std::log(y.delta_h / target.delta_h), 2) + std::pow(std::log(y.w / target.w), 2);
      if (e < best) {
        best = e;
        best_u = g;
      }
    }
  EXPECT_NEAR(u.v_t, best_u.v_t, 0.05);
  EXPECT_NEAR(u.v_w, best_u.v_w, 0.3);
  EXPECT_NEAR(u.v_t, kNominalInput.v_t, 0.2 * kNominalInput.v_t);
  EXPECT_NEAR(u.v_w, kNominalInput.v_w, 0.2 * kNominalInput.v_w);
}
