#pragma once
// Build quality metrics and model diagnostics.

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "waam/control.hpp"
#include "waam/geometry.hpp"
#include "waam/models.hpp"

namespace waam {

struct LayerSd {
  double h_sd = 0.0;
  double w_sd = 0.0;
  std::size_t count = 0;
};

/// Population standard deviation of dh and w over the samples kept after
/// optional edge masking.
inline LayerSd layer_sd(const LayerTrace& trace, double length, double margin, bool exclude_edges) {
  std::vector<bool> mask(trace.size(), false);
  if (exclude_edges) {
    const auto s = positions_of(trace);
    mask = edge_mask(s, length, margin);
  }
  double n = 0.0, mh = 0.0, mw = 0.0;
  for (std::size_t k = 0; k < trace.size(); ++k) {
    if (mask[k]) continue;
    n += 1.0;
    mh += trace.samples[k].y.delta_h;
    mw += trace.samples[k].y.w;
  }
  if (n == 0.0) fail(ErrorKind::empty_after_mask, "layer_sd: no samples left after edge masking");
  mh /= n;
  mw /= n;
  double vh = 0.0, vw = 0.0;
  for (std::size_t k = 0; k < trace.size(); ++k) {
    if (mask[k]) continue;
    vh += (trace.samples[k].y.delta_h - mh) * (trace.samples[k].y.delta_h - mh);
    vw += (trace.samples[k].y.w - mw) * (trace.samples[k].y.w - mw);
  }
  return {std::sqrt(vh / n), std::sqrt(vw / n), static_cast<std::size_t>(n)};
}

struct ReportRow {
  int layer = 0;  ///< 0 on the build-average row
  double height_sd = 0.0;
  double width_sd = 0.0;
  double height_sd_ex = 0.0;
  double width_sd_ex = 0.0;
};

struct BuildReport {
  std::string mode;
  std::vector<ReportRow> layers;
  ReportRow average;
};

inline BuildReport build_report(const BuildRecord& build, double margin = 5.0) {
  BuildReport rep;
  rep.mode = to_string(build.mode);
  if (build.layers.empty()) return rep;
  for (const auto& lr : build.layers) {
    const auto full = layer_sd(lr.trace, build.plant.length, margin, false);
    const auto ex = layer_sd(lr.trace, build.plant.length, margin, true);
    rep.layers.push_back({lr.trace.layer_index, full.h_sd, full.w_sd, ex.h_sd, ex.w_sd});
  }
  const double n = static_cast<double>(rep.layers.size());
  for (const auto& r : rep.layers) {
    rep.average.height_sd += r.height_sd / n;
    rep.average.width_sd += r.width_sd / n;
    rep.average.height_sd_ex += r.height_sd_ex / n;
    rep.average.width_sd_ex += r.width_sd_ex / n;
  }
  return rep;
}

/// Largest eigenvalue magnitude, read off the 1x1 and 2x2 diagonal blocks of
/// the real Schur form (shifted QR iteration).
inline double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  if (!a.allFinite()) fail(ErrorKind::numeric_fault, "spectral_radius: non-finite matrix");
  Eigen::RealSchur<Eigen::MatrixXd> schur(a, /*computeU=*/false);
  if (schur.info() != Eigen::Success) fail(ErrorKind::numeric_fault, "spectral_radius: Schur iteration did not converge");
  const Eigen::MatrixXd& t = schur.matrixT();
  const Eigen::Index n = t.rows();
  double rho = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    if (i + 1 < n && t(i + 1, i) != 0.0) {
      const double p = 0.5 * (t(i, i) + t(i + 1, i + 1));
      const double det = t(i, i) * t(i + 1, i + 1) - t(i, i + 1) * t(i + 1, i);
      const double disc = p * p - det;
      if (disc < 0.0) {
        rho = std::max(rho, std::sqrt(det));
      } else {
        const double r = std::sqrt(disc);
        rho = std::max({rho, std::abs(p + r), std::abs(p - r)});
      }
      i += 2;
    } else {
      rho = std::max(rho, std::abs(t(i, i)));
      ++i;
    }
  }
  return rho;
}

/// rho(A_k) along the trajectory driven by `inputs` from the zero state,
/// with A_k linearised at (x_k, u_k).
inline std::vector<double> spectral_radius_trace(const ModelParams& p, std::span<const ProcessInput> inputs) {
  if (!is_recurrent(p.arch())) fail(ErrorKind::unsupported, "spectral_radius_trace: requires a recurrent model");
  std::vector<double> rho;
  rho.reserve(inputs.size());
  ModelState st = ModelState::zero(p);
  for (const auto& u : inputs) {
    rho.push_back(spectral_radius(state_matrix(p, st, u)));
    model_step(p, st, p.norm().normalize_u(u));
  }
  return rho;
}

/// ||x_k|| of the hidden state after each step of every layer, re-driving
/// `p` from zero with the inputs the build actually applied.
inline std::vector<std::vector<double>> state_norm_trace(const ModelParams& p, const BuildRecord& build) {
  std::vector<std::vector<double>> out;
  for (const auto& lr : build.layers) {
    std::vector<double> norms;
    ModelState st = ModelState::zero(p);
    for (const auto& smp : lr.trace.samples) {
      model_step(p, st, p.norm().normalize_u(smp.u));
      norms.push_back(st.hidden(p).norm());
    }
    out.push_back(std::move(norms));
  }
  return out;
}

struct SteadyState {
  ProcessOutput y_inf;
  bool converged = false;
  int settle_step = -1;  ///< first step after which every increment stays below tol; -1 if never
  std::vector<ProcessOutput> outputs;
};

/// Constant-input rollout from the zero state. Converged when
/// ||y_k - y_{k-1}|| < tol over the final 10% of the horizon.
inline SteadyState steady_state_check(const ModelParams& p, const ProcessInput& u, int horizon = 600, double tol = 1e-3) {
  require(horizon >= 100, "steady_state_check: horizon must be >= 100 steps");
  const std::vector<ProcessInput> inputs(static_cast<std::size_t>(horizon), u);
  SteadyState res;
  res.outputs = rollout(p, inputs);
  std::vector<double> diff(res.outputs.size(), 0.0);
  for (std::size_t k = 1; k < res.outputs.size(); ++k)
    diff[k] = std::hypot(res.outputs[k].delta_h - res.outputs[k - 1].delta_h, res.outputs[k].w - res.outputs[k - 1].w);
  const std::size_t tail_start = res.outputs.size() - res.outputs.size() / 10;
  res.converged = true;
  for (std::size_t k = std::max<std::size_t>(1, tail_start); k < diff.size(); ++k)
    if (!(diff[k] < tol)) res.converged = false;
  std::size_t settle = diff.size();
  while (settle > 1 && diff[settle - 1] < tol) --settle;
  res.settle_step = settle < diff.size() ? static_cast<int>(settle) : -1;
  if (res.settle_step == 0) res.settle_step = 1;
  res.y_inf = res.outputs.back();
  return res;
}

/// First step after which consecutive values change by less than tol.
inline int settle_index(std::span<const double> xs, double tol) {
  std::size_t k = xs.size();
  while (k > 1 && std::abs(xs[k - 1] - xs[k - 2]) < tol) --k;
  return k < xs.size() ? static_cast<int>(k) : -1;
}

/// Mean wall time of one forward step (normalize, advance, denormalize) over
/// `steps` calls after `warmup` untimed calls, in milliseconds.
inline double step_latency_ms(const ModelParams& p, int steps = 10000, int warmup = 1000) {
  require(steps >= 1 && warmup >= 0, "step_latency_ms: bad step counts");
  if (!is_trainable(p.arch())) fail(ErrorKind::unsupported, "step_latency_ms: requires a sequence model");
  ModelState st = ModelState::zero(p);
  std::vector<ProcessInput> inputs(64);
  Rng rng(17);
  InputBounds box;
  for (auto& u : inputs) u = {rng.uniform(box.lo.v_t, box.hi.v_t), rng.uniform(box.lo.v_w, box.hi.v_w)};
  double sink = 0.0;
  auto step = [&](int k) {
    const auto y = p.norm().denormalize_y(model_step(p, st, p.norm().normalize_u(inputs[static_cast<std::size_t>(k) % inputs.size()])));
    sink += y.delta_h;
  };
  for (int k = 0; k < warmup; ++k) step(k);
  const auto t0 = std::chrono::steady_clock::now();
  for (int k = 0; k < steps; ++k) step(k);
  const auto t1 = std::chrono::steady_clock::now();
  if (!std::isfinite(sink)) fail(ErrorKind::numeric_fault, "step_latency_ms: non-finite output");
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / steps;
}

}  // namespace waam
