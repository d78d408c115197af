#pragma once
// Static power-law baseline: ln(dh) and ln(w) affine in (ln v_T, ln v_W).

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <utility>

#include "waam/core.hpp"
#include "waam/params.hpp"

namespace waam {

struct LogLogModel {
  /// ln(dh) = alpha[0] ln(v_T) + alpha[1] ln(v_W) + alpha[2]
  Eigen::Vector3d alpha = Eigen::Vector3d::Zero();
  /// ln(w) = beta[0] ln(v_T) + beta[1] ln(v_W) + beta[2]
  Eigen::Vector3d beta = Eigen::Vector3d::Zero();

  ModelParams to_params() const {
    ModelParams p = ModelParams::zeros(Arch::loglog, 1);
    p.view(0) = alpha;
    p.view(1) = beta;
    return p;
  }
  static LogLogModel from_params(const ModelParams& p) {
    require(p.arch() == Arch::loglog, "LogLogModel: parameters are not a loglog model");
    LogLogModel m;
    m.alpha = p.view(0);
    m.beta = p.view(1);
    return m;
  }
};

struct IOSample {
  ProcessInput u;
  ProcessOutput y;
};

/// Ordinary least squares in log space via column-pivoted QR.
inline LogLogModel loglog_fit(std::span<const IOSample> samples) {
  const auto m = static_cast<Eigen::Index>(samples.size());
  if (m < 3) fail(ErrorKind::degenerate_fit, "loglog_fit: need at least 3 samples");
  Eigen::MatrixXd x(m, 3);
  Eigen::MatrixXd rhs(m, 2);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& smp = samples[static_cast<std::size_t>(i)];
    if (!(smp.u.v_t > 0.0 && smp.u.v_w > 0.0 && smp.y.delta_h > 0.0 && smp.y.w > 0.0) ||
        !all_finite({smp.u.v_t, smp.u.v_w, smp.y.delta_h, smp.y.w}))
      fail(ErrorKind::invalid_argument, "loglog_fit: all inputs and outputs must be positive and finite");
    x(i, 0) = std::log(smp.u.v_t);
    x(i, 1) = std::log(smp.u.v_w);
    x(i, 2) = 1.0;
    rhs(i, 0) = std::log(smp.y.delta_h);
    rhs(i, 1) = std::log(smp.y.w);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < 3) fail(ErrorKind::degenerate_fit, "loglog_fit: design matrix is rank deficient in log space");
  const Eigen::MatrixXd coef = qr.solve(rhs);
  return {coef.col(0), coef.col(1)};
}

inline ProcessOutput loglog_predict(const LogLogModel& m, const ProcessInput& u) {
  if (!(u.v_t > 0.0 && u.v_w > 0.0)) fail(ErrorKind::invalid_argument, "loglog_predict: inputs must be positive");
  const double lt = std::log(u.v_t), lw = std::log(u.v_w);
  return {std::exp(m.alpha[0] * lt + m.alpha[1] * lw + m.alpha[2]),
          std::exp(m.beta[0] * lt + m.beta[1] * lw + m.beta[2])};
}

/// Solves the 2x2 log-space system for the input producing `target`, then
/// clamps to `bounds`. When the exponent matrix is singular but the target is
/// consistent, returns the solution closest (in log space) to the geometric
/// centre of the input box.
inline ProcessInput loglog_invert(const LogLogModel& m, const ProcessOutput& target, const InputBounds& bounds = {}) {
  if (!(target.delta_h > 0.0 && target.w > 0.0)) fail(ErrorKind::invalid_argument, "loglog_invert: targets must be positive");
  Eigen::Matrix2d a;
  a << m.alpha[0], m.alpha[1], m.beta[0], m.beta[1];
  const Eigen::Vector2d b{std::log(target.delta_h) - m.alpha[2], std::log(target.w) - m.beta[2]};

  const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::Vector2d z;
  if (std::abs(a.determinant()) > 1e-12 * scale * scale) {
    z = a.partialPivLu().solve(b);
  } else {
    const Eigen::Vector2d centre{0.5 * (std::log(bounds.lo.v_t) + std::log(bounds.hi.v_t)),
                                 0.5 * (std::log(bounds.lo.v_w) + std::log(bounds.hi.v_w))};
    Eigen::CompleteOrthogonalDecomposition<Eigen::Matrix2d> cod(a);
    cod.setThreshold(1e-12);
    // closest point of {z : a z = b} to the centre
    z = centre + cod.solve(b - a * centre);
    if ((a * z - b).norm() > 1e-9 * (1.0 + b.norm()))
      fail(ErrorKind::degenerate_model, "loglog_invert: singular exponent matrix and inconsistent target");
  }
  return bounds.clamp({std::exp(z[0]), std::exp(z[1])});
}

}  // namespace waam
