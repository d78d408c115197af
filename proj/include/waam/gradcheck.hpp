#pragma once
// Finite-difference verification of BPTT gradients, input Jacobians and
// state matrices on random instances.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "waam/core.hpp"
#include "waam/models.hpp"
#include "waam/params.hpp"
#include "waam/training.hpp"

namespace waam {

struct GradTolerance {
  double rel = 1e-4;
  double abs_floor = 1e-6;
};

/// |a - b| relative to the larger magnitude, with the denominator floored.
inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "max_relative_error: shape mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a.data()[i], b.data()[i], floor));
  return worst;
}

/// Fourth-order central difference of a scalar function along one coordinate.
template <class F>
double central_difference(F&& f, double x0, double h) {
  return (-f(x0 + 2 * h) + 8 * f(x0 + h) - 8 * f(x0 - h) + f(x0 - 2 * h)) / (12 * h);
}

struct GradInstance {
  ModelParams params;
  std::vector<Sequence> sequences;
  ModelState state;  ///< random state for Jacobian checks
  ProcessInput u;
};

/// Random parameters (initialiser scale, random biases), random normalization
/// statistics and a short random sequence set.
inline GradInstance random_grad_instance(Arch arch, int n, std::uint64_t seed) {
  Rng rng(seed);
  GradInstance inst;
  inst.params = model_init(arch, n, seed ^ 0x9E3779B97F4A7C15ull);
  for (std::size_t i = 0; i < inst.params.blocks().size(); ++i) {
    if (inst.params.block(i).cols != 1) continue;
    auto b = inst.params.view(i);
    for (Eigen::Index r = 0; r < b.rows(); ++r) b(r, 0) = rng.uniform(-0.5, 0.5);
  }
  auto& ns = inst.params.norm();
  ns.u_mean = {rng.uniform(5.0, 9.0), rng.uniform(40.0, 80.0)};
  ns.u_std = {rng.uniform(1.0, 4.0), rng.uniform(10.0, 25.0)};
  ns.y_mean = {rng.uniform(1.0, 3.0), rng.uniform(4.0, 7.0)};
  ns.y_std = {rng.uniform(0.2, 1.0), rng.uniform(0.5, 2.0)};

  const int n_seq = 2;
  for (int s = 0; s < n_seq; ++s) {
    Sequence seq;
    const int len = 4 + static_cast<int>(rng.below(6));
    for (int k = 0; k < len; ++k) {
      seq.u.emplace_back(rng.normal(), rng.normal());
      seq.y.emplace_back(rng.normal(), rng.normal());
    }
    inst.sequences.push_back(std::move(seq));
  }
  inst.state = ModelState::zero(inst.params);
  for (Eigen::Index i = 0; i < inst.state.x.size(); ++i) inst.state.x[i] = rng.uniform(-0.8, 0.8);
  inst.u = {ns.u_mean[0] + ns.u_std[0] * rng.normal(), ns.u_mean[1] + ns.u_std[1] * rng.normal()};
  return inst;
}

struct GradCheckReport {
  double param_error = 0.0;     ///< worst relative error over dL/dtheta
  double jacobian_error = 0.0;  ///< worst relative error over J = dy/du
  double state_error = 0.0;     ///< worst relative error over A = dx'/dx (recurrent only)
  double worst() const { return std::max({param_error, jacobian_error, state_error}); }
};

inline GradCheckReport check_instance(const GradInstance& inst, const GradTolerance& tol = {}, double h = 1e-4) {
  GradCheckReport rep;
  const std::span<const Sequence> seqs(inst.sequences);
  const Eigen::VectorXd analytic = loss_and_gradients(inst.params, seqs, true).grad;
  ModelParams p = inst.params;
  Eigen::VectorXd numeric(analytic.size());
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double keep = p.theta()[i];
    numeric[i] = central_difference(
        [&](double v) {
          p.theta()[i] = v;
          return loss_and_gradients(p, seqs, false).loss;
        },
        keep, h);
    p.theta()[i] = keep;
  }
  rep.param_error = max_relative_error(analytic, numeric, tol.abs_floor);

  const Eigen::Matrix2d jac = input_jacobian(inst.params, inst.state, inst.u);
  Eigen::Matrix2d jac_fd;
  for (int c = 0; c < 2; ++c) {
    const double step = h * inst.params.norm().u_std[c];
    for (int r = 0; r < 2; ++r) {
      jac_fd(r, c) = central_difference(
          [&](double v) {
            ProcessInput u = inst.u;
            (c == 0 ? u.v_t : u.v_w) = v;
            const auto y = predict_next(inst.params, inst.state, u);
            return r == 0 ? y.delta_h : y.w;
          },
          c == 0 ? inst.u.v_t : inst.u.v_w, step);
    }
  }
  rep.jacobian_error = max_relative_error(jac, jac_fd, tol.abs_floor);

  if (is_recurrent(inst.params.arch())) {
    const Eigen::MatrixXd a = state_matrix(inst.params, inst.state, inst.u);
    const Eigen::Vector2d un = inst.params.norm().normalize_u(inst.u);
    const Eigen::Index d = inst.state.x.size();
    Eigen::MatrixXd a_fd(d, d);
    for (Eigen::Index c = 0; c < d; ++c) {
      for (Eigen::Index r = 0; r < d; ++r) {
        a_fd(r, c) = central_difference(
            [&](double v) {
              ModelState st = inst.state;
              st.x[c] = v;
              model_step(inst.params, st, un);
              return st.x[r];
            },
            inst.state.x[c], h);
      }
    }
    rep.state_error = max_relative_error(a, a_fd, tol.abs_floor);
  }
  return rep;
}

struct ArchGradSummary {
  Arch arch = Arch::rnn;
  int instances = 0;
  GradCheckReport worst;
};

/// Runs `per_size` random instances for each size in `sizes`.
inline ArchGradSummary check_architecture(Arch arch, std::span<const int> sizes, int per_size, std::uint64_t seed,
                                          const GradTolerance& tol = {}) {
  ArchGradSummary out;
  out.arch = arch;
  for (int n : sizes) {
    for (int i = 0; i < per_size; ++i) {
      const auto inst = random_grad_instance(arch, n, seed * 7919 + static_cast<std::uint64_t>(n) * 131 + i);
      const auto r = check_instance(inst, tol);
      out.worst.param_error = std::max(out.worst.param_error, r.param_error);
      out.worst.jacobian_error = std::max(out.worst.jacobian_error, r.jacobian_error);
      out.worst.state_error = std::max(out.worst.state_error, r.state_error);
      ++out.instances;
    }
  }
  return out;
}

}  // namespace waam
