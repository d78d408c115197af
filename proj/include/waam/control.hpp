#pragma once
// Layer targets and the constrained one-step-ahead controller, plus the
// closed-loop driver that runs a multi-layer build against the plant.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "waam/core.hpp"
#include "waam/geometry.hpp"
#include "waam/loglog.hpp"
#include "waam/models.hpp"
#include "waam/plant.hpp"
#include "waam/training.hpp"

namespace waam {

struct ControllerConfig {
  ProcessOutput target = kNominalOutput;
  Eigen::Vector2d output_weight{1.0, 0.5};     ///< diagonal of W
  Eigen::Vector2d regularization{0.01, 0.1};   ///< diagonal of Lambda (v_T, v_W increments)
  ProcessInput max_rate{2.0, 4.23};            ///< |du| per step, mm/s
  InputBounds bounds;
  double alpha = 0.3;
  double rate_hz = 10.0;
  double interlayer_wait = 45.0;  ///< s
  double wire_quantum = 0.0;      ///< v_W command step, 0 = continuous
  ProcessInput nominal = kNominalInput;

  std::string validate() const {
    if (!(output_weight.array() >= 0.0).all() || !(regularization.array() >= 0.0).all())
      return "weights and regularization must be >= 0";
    if (!(bounds.lo.v_t < bounds.hi.v_t && bounds.lo.v_w < bounds.hi.v_w)) return "input bounds must satisfy min < max";
    if (!(bounds.lo.v_t > 0.0)) return "torch speed lower bound must be positive";
    if (!(max_rate.v_t > 0.0 && max_rate.v_w > 0.0)) return "rate limits must be positive";
    if (!(alpha > 0.0 && alpha <= 1.0)) return "alpha must be in (0, 1]";
    if (!(rate_hz > 0.0) || interlayer_wait < 0.0 || wire_quantum < 0.0) return "bad timing or quantizer settings";
    if (!bounds.contains(nominal)) return "nominal input must lie inside the input bounds";
    if (!(target.delta_h > 0.0 && target.w > 0.0)) return "targets must be positive";
    return {};
  }
};

/// Uniform slicing: the target top surface after layer i is i * layer_height.
struct TargetProfile {
  double layer_height = kNominalOutput.delta_h;
  double height(int layer_index, double /*s*/) const { return layer_index * layer_height; }
};

/// Height increment still needed at s_k on layer i, and the width target.
/// `prev_aligned` must already be expressed in layer i's direction frame.
inline ProcessOutput compute_target(int layer_index, double s_k, const TargetProfile& target,
                                    const HeightProfile& prev_aligned, double w_target) {
  return {target.height(layer_index, s_k) - interpolate_height(prev_aligned, s_k), w_target};
}

struct BoxLsResult {
  Eigen::Vector2d du = Eigen::Vector2d::Zero();
  double objective = 0.0;
  std::array<int, 2> pattern{0, 0};  ///< per coordinate: 0 free, 1 at lower, 2 at upper
  bool degenerate = false;
};

/// min ||W (J du + e)||^2 + du' Lambda du  s.t.  lo <= du <= hi, solved
/// exactly by enumerating all nine per-coordinate activity patterns.
/// W and Lambda are diagonal and given by their diagonals.
inline BoxLsResult solve_box_ls(const Eigen::Matrix2d& jac, const Eigen::Vector2d& e, const Eigen::Vector2d& w_diag,
                                const Eigen::Vector2d& lambda_diag, const Eigen::Vector2d& lo, const Eigen::Vector2d& hi) {
  require((lo.array() <= hi.array()).all(), "solve_box_ls: empty box");
  const Eigen::Matrix2d wj = w_diag.asDiagonal() * jac;
  const Eigen::Vector2d we = w_diag.cwiseProduct(e);
  Eigen::Matrix2d h = wj.transpose() * wj;
  h.diagonal() += lambda_diag;
  const Eigen::Vector2d g = wj.transpose() * we;
  const double c0 = we.squaredNorm();
  auto objective = [&](const Eigen::Vector2d& d) { return d.dot(h * d) + 2.0 * g.dot(d) + c0; };

  BoxLsResult best;
  const double scale = std::max(h.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  if (std::abs(h.determinant()) <= 1e-14 * scale * scale) {
    best.degenerate = true;
    best.objective = objective(best.du);
    return best;
  }

  const double tol = 1e-12 * (1.0 + std::max(lo.cwiseAbs().maxCoeff(), hi.cwiseAbs().maxCoeff()));
  bool have = false;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      const std::array<int, 2> pat{a, b};
      Eigen::Vector2d d;
      for (int i = 0; i < 2; ++i)
        if (pat[i] == 1) d[i] = lo[i];
        else if (pat[i] == 2) d[i] = hi[i];
      if (a == 0 && b == 0) {
        d = h.partialPivLu().solve(-g);
      } else if (a == 0 || b == 0) {
        const int f = a == 0 ? 0 : 1, o = 1 - f;
        if (!(h(f, f) > 0.0)) continue;
        d[f] = -(g[f] + h(f, o) * d[o]) / h(f, f);
      }
      if (!d.allFinite() || (d.array() < lo.array() - tol).any() || (d.array() > hi.array() + tol).any()) continue;
      d = d.cwiseMax(lo).cwiseMin(hi);
      const double obj = objective(d);
      const bool better = !have || obj < best.objective - 1e-15 * (1.0 + std::abs(best.objective)) ||
                          (std::abs(obj - best.objective) <= 1e-15 * (1.0 + std::abs(best.objective)) &&
                           d.norm() < best.du.norm());
      if (better) {
        best.du = d;
        best.objective = obj;
        best.pattern = pat;
        have = true;
      }
    }
  }
  return best;
}

/// Largest violation of the box-QP first-order conditions at du.
inline double box_ls_kkt_residual(const Eigen::Matrix2d& jac, const Eigen::Vector2d& e, const Eigen::Vector2d& w_diag,
                                  const Eigen::Vector2d& lambda_diag, const Eigen::Vector2d& lo, const Eigen::Vector2d& hi,
                                  const Eigen::Vector2d& du) {
  const Eigen::Matrix2d wj = w_diag.asDiagonal() * jac;
  Eigen::Matrix2d h = wj.transpose() * wj;
  h.diagonal() += lambda_diag;
  const Eigen::Vector2d grad = 2.0 * (h * du + wj.transpose() * w_diag.cwiseProduct(e));
  double res = 0.0;
  for (int i = 0; i < 2; ++i) {
    res = std::max({res, lo[i] - du[i], du[i] - hi[i]});
    const double width = hi[i] - lo[i];
    const double tol = 1e-12 * (1.0 + width);
    const bool at_lo = du[i] <= lo[i] + tol, at_hi = du[i] >= hi[i] - tol;
    if (at_lo && at_hi) continue;  // degenerate box: any gradient is admissible
    if (at_lo) res = std::max(res, -grad[i]);
    else if (at_hi) res = std::max(res, grad[i]);
    else res = std::max(res, std::abs(grad[i]));
  }
  return res;
}

struct ControlStep {
  Eigen::Vector2d du = Eigen::Vector2d::Zero();  ///< optimal increment before the step size
  ProcessInput u;                                ///< applied input
  ProcessOutput y_pred;                          ///< model prediction at the applied input
  ProcessOutput y_bar;                           ///< prediction at the previous input
  Eigen::Matrix2d jacobian = Eigen::Matrix2d::Zero();
  bool degenerate = false;
};

inline Eigen::Vector2d as_vec(const ProcessInput& u) { return {u.v_t, u.v_w}; }
inline Eigen::Vector2d as_vec(const ProcessOutput& y) { return {y.delta_h, y.w}; }
inline ProcessInput as_input(const Eigen::Vector2d& v) { return {v[0], v[1]}; }

/// The increment box: rate limits intersected with the input box shifted by u_prev.
inline std::pair<Eigen::Vector2d, Eigen::Vector2d> increment_box(const ProcessInput& u_prev, const ControllerConfig& cfg) {
  const Eigen::Vector2d lo = (-as_vec(cfg.max_rate)).cwiseMax(as_vec(cfg.bounds.lo) - as_vec(u_prev));
  const Eigen::Vector2d hi = as_vec(cfg.max_rate).cwiseMin(as_vec(cfg.bounds.hi) - as_vec(u_prev));
  return {lo, hi};
}

inline ProcessInput quantize_wire(ProcessInput u, const ControllerConfig& cfg) {
  if (cfg.wire_quantum > 0.0) u.v_w = std::round(u.v_w / cfg.wire_quantum) * cfg.wire_quantum;
  return cfg.bounds.clamp(u);
}

/// One controller update: linearise the model about the previous input,
/// solve the box-constrained least squares for du, apply u_prev + alpha du.
inline ControlStep one_step_control(const ModelParams& p, const ModelState& st, const ProcessInput& u_prev,
                                    const ProcessOutput& y_target, const ControllerConfig& cfg) {
  ControlStep out;
  out.y_bar = predict_next(p, st, u_prev);
  out.jacobian = input_jacobian(p, st, u_prev);
  if (!out.jacobian.allFinite()) fail(ErrorKind::numeric_fault, "one_step_control: non-finite input Jacobian");
  const ProcessInput base = cfg.bounds.clamp(u_prev);
  const auto [lo, hi] = increment_box(base, cfg);
  const Eigen::Vector2d err = as_vec(out.y_bar) - as_vec(y_target);
  const auto sol = solve_box_ls(out.jacobian, err, cfg.output_weight, cfg.regularization, lo, hi);
  out.du = sol.du;
  out.degenerate = sol.degenerate;
  out.u = quantize_wire(cfg.bounds.clamp(as_input(as_vec(base) + cfg.alpha * sol.du)), cfg);
  out.y_pred = predict_next(p, st, out.u);
  return out;
}

enum class ControlMode { baseline_constant, loglog_inverse, rnn_onestep, rnn_adaptive };

inline const char* to_string(ControlMode m) {
  switch (m) {
    case ControlMode::baseline_constant: return "baseline-constant";
    case ControlMode::loglog_inverse: return "loglog-inverse";
    case ControlMode::rnn_onestep: return "rnn-onestep";
    case ControlMode::rnn_adaptive: return "rnn-adaptive";
  }
  return "unknown";
}

inline ControlMode parse_mode(std::string_view s) {
  if (s == "baseline-constant" || s == "baseline") return ControlMode::baseline_constant;
  if (s == "loglog-inverse" || s == "loglog") return ControlMode::loglog_inverse;
  if (s == "rnn-onestep" || s == "rnn") return ControlMode::rnn_onestep;
  if (s == "rnn-adaptive") return ControlMode::rnn_adaptive;
  fail(ErrorKind::invalid_argument, "unknown control mode '" + std::string(s) + "'");
}

inline bool uses_sequence_model(ControlMode m) {
  return m == ControlMode::rnn_onestep || m == ControlMode::rnn_adaptive;
}

struct LayerRecord {
  LayerTrace trace;                     ///< plant truth and applied inputs
  std::vector<ProcessOutput> y_pred;    ///< model prediction at the applied input
  std::vector<ProcessOutput> y_target;
  std::vector<double> state_norm;       ///< norm of the model's hidden state after each step
  std::vector<Eigen::VectorXd> states;  ///< model state x_k in force when u_k was chosen
  double fine_tune_loss = std::numeric_limits<double>::quiet_NaN();  ///< after adapting on this layer
  double model_h_mae = std::numeric_limits<double>::quiet_NaN();     ///< model used on this layer, free-run
  double frozen_h_mae = std::numeric_limits<double>::quiet_NaN();    ///< offline model on this layer, free-run
  int degenerate_steps = 0;
};

struct BuildRecord {
  ControlMode mode = ControlMode::baseline_constant;
  std::uint64_t seed = 0;
  PlantConfig plant;
  ControllerConfig controller;
  std::vector<LayerRecord> layers;
  HeightProfile profile;
  std::string failure;  ///< empty when every layer completed
};

struct ClosedLoopOptions {
  FineTuneConfig fine_tune;
  bool keep_states = false;
};

inline double free_run_height_mae(const ModelParams& p, const LayerTrace& tr) {
  std::vector<ProcessInput> u;
  u.reserve(tr.size());
  for (const auto& smp : tr.samples) u.push_back(smp.u);
  const auto yhat = rollout(p, u);
  double s = 0.0;
  for (std::size_t k = 0; k < tr.size(); ++k) s += std::abs(yhat[k].delta_h - tr.samples[k].y.delta_h);
  return tr.empty() ? 0.0 : s / static_cast<double>(tr.size());
}

/// Simulates an `n_layers` back-and-forth build. Sequence-model modes start
/// each layer from the zero state and drive the model open loop with the
/// applied inputs; rnn-adaptive fine-tunes between layers on the most recent
/// layer(s). Errors inside a layer end the build and are recorded in
/// `failure`.
inline BuildRecord run_closed_loop(const PlantConfig& plant_cfg, const ModelParams* model, const LogLogModel* loglog,
                                   const ControllerConfig& ctrl, int n_layers, ControlMode mode,
                                   const ClosedLoopOptions& opts = {}) {
  if (const auto msg = ctrl.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "ControllerConfig: " + msg);
  if (const auto msg = plant_cfg.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "PlantConfig: " + msg);
  require(n_layers >= 1, "run_closed_loop: n_layers must be >= 1");
  if (uses_sequence_model(mode) && (!model || !is_trainable(model->arch())))
    fail(ErrorKind::invalid_argument, "run_closed_loop: mode requires a sequence model");
  if (mode == ControlMode::loglog_inverse && !loglog)
    fail(ErrorKind::invalid_argument, "run_closed_loop: loglog-inverse mode requires a loglog model");
  require(std::abs(ctrl.rate_hz * plant_cfg.t_s - 1.0) < 1e-9, "run_closed_loop: control rate must match the plant sampling");

  BuildRecord rec;
  rec.mode = mode;
  rec.seed = plant_cfg.seed;
  rec.plant = plant_cfg;
  rec.controller = ctrl;
  PlantState plant = PlantState::initial(plant_cfg);
  const TargetProfile target{ctrl.target.delta_h};
  std::optional<ModelParams> current;
  if (model) current = *model;

  for (int layer = 1; layer <= n_layers; ++layer) {
    LayerRecord lr;
    try {
      const Direction dir = direction_for_layer(layer);
      const HeightProfile prev = dir == Direction::forward ? plant.build : plant.build.mirrored();
      ModelState mstate;
      if (current) mstate = ModelState::zero(*current);
      ProcessInput u_prev = ctrl.nominal;

      auto controller = [&](const StepContext& ctx) -> ProcessInput {
        const ProcessOutput y_star = compute_target(layer, ctx.s, target, prev, ctrl.target.w);
        lr.y_target.push_back(y_star);
        ProcessInput u = ctrl.nominal;
        switch (mode) {
          case ControlMode::baseline_constant:
            lr.y_pred.push_back(current ? predict_next(*current, mstate, u)
                                        : loglog ? loglog_predict(*loglog, u) : ProcessOutput{});
            break;
          case ControlMode::loglog_inverse: {
            const ProcessOutput reachable{std::max(y_star.delta_h, 1e-3), y_star.w};
            const ProcessInput wanted = loglog_invert(*loglog, reachable, ctrl.bounds);
            const Eigen::Vector2d du = (as_vec(wanted) - as_vec(u_prev))
                                           .cwiseMax(-as_vec(ctrl.max_rate))
                                           .cwiseMin(as_vec(ctrl.max_rate));
            u = quantize_wire(ctrl.bounds.clamp(as_input(as_vec(u_prev) + ctrl.alpha * du)), ctrl);
            lr.y_pred.push_back(loglog_predict(*loglog, u));
            break;
          }
          case ControlMode::rnn_onestep:
          case ControlMode::rnn_adaptive: {
            const ControlStep step = one_step_control(*current, mstate, u_prev, y_star, ctrl);
            u = step.u;
            lr.y_pred.push_back(step.y_pred);
            if (step.degenerate) ++lr.degenerate_steps;
            break;
          }
        }
        if (current) {
          if (opts.keep_states) lr.states.push_back(mstate.x);
          model_step(*current, mstate, current->norm().normalize_u(u));
          lr.state_norm.push_back(mstate.hidden(*current).norm());
        }
        u_prev = u;
        return u;
      };
      lr.trace = run_layer(plant, plant_cfg, InputSource{InputCallback(controller)});

      if (current) {
        lr.model_h_mae = free_run_height_mae(*current, lr.trace);
        lr.frozen_h_mae = free_run_height_mae(*model, lr.trace);
      }
      rec.layers.push_back(std::move(lr));

      if (mode == ControlMode::rnn_adaptive && layer < n_layers) {
        const int window = std::max(1, opts.fine_tune.window);
        std::vector<LayerTrace> recent;
        for (int j = std::max<int>(0, static_cast<int>(rec.layers.size()) - window); j < static_cast<int>(rec.layers.size()); ++j)
          recent.push_back(rec.layers[static_cast<std::size_t>(j)].trace);
        auto ft = fine_tune(*current, std::span<const LayerTrace>(recent), opts.fine_tune);
        current = std::move(ft.params);
        rec.layers.back().fine_tune_loss = ft.loss;
      }
      interlayer_wait(plant, plant_cfg, ctrl.interlayer_wait);
    } catch (const Error& e) {
      rec.failure = "layer " + std::to_string(layer) + ": " + e.what();
      break;
    }
  }
  rec.profile = plant.build;
  return rec;
}

}  // namespace waam
