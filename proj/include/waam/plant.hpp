#pragma once
// Synthetic deposition plant. A first-order thermal proxy with
// layer-dependent cooling drives bead width; height follows from conserved
// wire volume. Arc-on over-deposit and arc-off droop shape the layer edges.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <type_traits>
#include <variant>
#include <vector>

#include "waam/core.hpp"
#include "waam/geometry.hpp"

namespace waam {

struct PlantConfig {
  double t_s = 0.1;        ///< s
  double length = 110.0;   ///< mm
  double k_q = 2.0;        ///< K per (mm/s) per s
  double k_c0 = 0.5;       ///< 1/s
  double k_layer = 0.3;
  double t_env = 300.0;
  double t_ref = 1700.0;
  double k_a = 0.72963779527559058;  ///< mm, calibrated
  double w0 = 3.0;                  ///< mm
  double k_w = 1.1351651336462178;  ///< calibrated
  double k_t = 0.35;
  double k_shape = 0.66;
  double r0 = 0.35;
  double tau_on = 1.5;   ///< s
  double d0 = 0.3;
  double sigma_end = 6.0;  ///< mm
  double sigma_h = 0.02;   ///< mm
  double sigma_w = 0.04;   ///< mm
  int lag_samples = 0;     ///< measurement delay of both output channels
  bool edge_effects = true;
  std::uint64_t seed = 0;

  double cooling_rate(int layer_index) const { return k_c0 / (1.0 + k_layer * layer_index); }

  /// Empty string when the configuration is usable.
  std::string validate() const {
    if (!all_finite({t_s, length, k_q, k_c0, k_layer, t_env, t_ref, k_a, w0, k_w, k_t, k_shape, r0, tau_on, d0,
                     sigma_end, sigma_h, sigma_w}))
      return "all plant constants must be finite";
    if (!(t_s > 0.0)) return "t_s must be positive";
    if (!(length > 0.0)) return "length must be positive";
    if (!(k_c0 > 0.0)) return "k_c0 must be positive";
    if (k_c0 * t_s >= 1.0) return "k_c0 * t_s must be < 1 for a monotone thermal update";
    if (k_layer < 0.0) return "k_layer must be >= 0";
    if (!(t_ref > 0.0)) return "t_ref must be positive";
    if (!(k_shape > 0.0)) return "k_shape must be positive";
    if (!(w0 > 0.0)) return "w0 must be positive";
    if (!(tau_on > 0.0) || !(sigma_end > 0.0)) return "edge time/length constants must be positive";
    if (sigma_h < 0.0 || sigma_w < 0.0) return "noise sigmas must be >= 0";
    if (lag_samples < 0) return "lag_samples must be >= 0";
    return {};
  }
};

/// Nominal operating point and the outputs it should produce at steady state.
inline constexpr ProcessInput kNominalInput{7.5, 63.5};
inline constexpr ProcessOutput kNominalOutput{1.8, 5.2};

struct PlantState {
  double temperature = 300.0;
  double s = 0.0;  ///< mm along the current layer's path
  double t = 0.0;  ///< s since arc-on
  int layer_index = 1;  ///< layer being (or about to be) deposited
  HeightProfile build;  ///< accumulated measured profile, physical frame
  Rng rng{0};

  static PlantState initial(const PlantConfig& cfg, double grid_spacing = 0.5) {
    PlantState st;
    st.temperature = cfg.t_env;
    st.build = HeightProfile::substrate(cfg.length, grid_spacing);
    st.rng.reseed(cfg.seed);
    return st;
  }
};

/// Noise-free bead geometry at a given thermal state, without edge factors.
inline ProcessOutput bead_geometry(const PlantConfig& cfg, double temperature, const ProcessInput& u) {
  const double area = cfg.k_a * (u.v_w / u.v_t);
  const double w = cfg.w0 + cfg.k_w * std::sqrt(area) * (1.0 + cfg.k_t * (temperature - cfg.t_ref) / cfg.t_ref);
  return {area / (cfg.k_shape * w), w};
}

inline double edge_factor(const PlantConfig& cfg, double t, double s) {
  if (!cfg.edge_effects) return 1.0;
  const double start = 1.0 + cfg.r0 * std::exp(-t / cfg.tau_on);
  const double end = 1.0 - cfg.d0 * std::exp(-(cfg.length - s) / cfg.sigma_end);
  return start * end;
}

/// One sampling period. The returned output is produced by `u` at the
/// pre-step thermal state and position.
inline ProcessOutput plant_step(PlantState& st, const ProcessInput& u, const PlantConfig& cfg) {
  if (!(u.v_t > 0.0)) fail(ErrorKind::invalid_argument, "plant_step: torch speed must be positive");
  if (!all_finite({u.v_t, u.v_w}) || u.v_w < 0.0) fail(ErrorKind::invalid_argument, "plant_step: bad wire feed rate");

  const ProcessOutput bead = bead_geometry(cfg, st.temperature, u);
  ProcessOutput y{bead.delta_h * edge_factor(cfg, st.t, st.s), bead.w};
  if (cfg.sigma_h > 0.0) y.delta_h += cfg.sigma_h * st.rng.normal();
  if (cfg.sigma_w > 0.0) y.w += cfg.sigma_w * st.rng.normal();

  const double k_cool = cfg.cooling_rate(st.layer_index);
  st.temperature += cfg.t_s * (cfg.k_q * u.v_w - k_cool * (st.temperature - cfg.t_env));
  st.s = advance_position(st.s, u.v_t, cfg.t_s);
  st.t += cfg.t_s;
  return y;
}

struct StepContext {
  int k = 0;
  double t = 0.0;
  double s = 0.0;
  int layer_index = 1;
  Direction direction = Direction::forward;
};

using ConstantInput = ProcessInput;
using RecordedInput = std::span<const ProcessInput>;  ///< last entry repeats if the layer runs longer
using InputCallback = std::function<ProcessInput(const StepContext&)>;
using InputSource = std::variant<ConstantInput, RecordedInput, InputCallback>;

/// Deposits the current layer from s = 0 to L and folds it into the build
/// profile. Samples are taken at the start of each period; the final step is
/// truncated at L and records nothing there.
inline LayerTrace run_layer(PlantState& st, const PlantConfig& cfg, const InputSource& source) {
  if (const auto msg = cfg.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "PlantConfig: " + msg);

  LayerTrace trace;
  trace.layer_index = st.layer_index;
  trace.t_s = cfg.t_s;
  trace.direction = direction_for_layer(st.layer_index);

  std::vector<ProcessOutput> truth;
  constexpr double kEndTolerance = 1e-9;
  for (int k = 0; st.s < cfg.length - kEndTolerance; ++k) {
    const StepContext ctx{k, st.t, st.s, st.layer_index, trace.direction};
    const ProcessInput u = std::visit(
        [&](const auto& src) -> ProcessInput {
          using T = std::decay_t<decltype(src)>;
          if constexpr (std::is_same_v<T, ConstantInput>) {
            return src;
          } else if constexpr (std::is_same_v<T, RecordedInput>) {
            require(!src.empty(), "run_layer: empty recorded input");
            return src[std::min<std::size_t>(static_cast<std::size_t>(k), src.size() - 1)];
          } else {
            return src(ctx);
          }
        },
        source);
    const double s_here = st.s;
    const double t_here = st.t;
    truth.push_back(plant_step(st, u, cfg));
    st.s = std::min(quantize_position(st.s), cfg.length);
    trace.samples.push_back({t_here, s_here, u, {}});
  }
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const std::size_t src = k >= static_cast<std::size_t>(cfg.lag_samples) ? k - cfg.lag_samples : 0;
    trace.samples[k].y = truth[src];
  }
  st.build = accumulate_layer(st.build, trace);
  return trace;
}

/// Cools with no heat input for `wait_s` seconds, then resets the path for
/// the next layer.
inline void interlayer_wait(PlantState& st, const PlantConfig& cfg, double wait_s) {
  require(std::isfinite(wait_s) && wait_s >= 0.0, "interlayer_wait: wait must be finite and >= 0");
  const double k_cool = cfg.cooling_rate(st.layer_index);
  double remaining = wait_s;
  while (remaining > 0.0) {
    const double dt = std::min(cfg.t_s, remaining);
    st.temperature -= dt * k_cool * (st.temperature - cfg.t_env);
    remaining -= dt;
  }
  st.s = 0.0;
  st.t = 0.0;
  ++st.layer_index;
}

/// Thermal fixed point under constant wire feed at the given layer.
inline double steady_temperature(const PlantConfig& cfg, double v_w, int layer_index) {
  return cfg.t_env + cfg.k_q * v_w / cfg.cooling_rate(layer_index);
}

struct CalibrationResult {
  double k_a = 0.0;
  double k_w = 0.0;
  int iterations = 0;
  double residual = 0.0;
};

/// Newton root-find over (k_A, k_w), with w0 held, so that the noise-free,
/// edge-free steady state at `u` and `layer_index` reproduces `target`.
inline CalibrationResult calibrate_plant(PlantConfig cfg, ProcessInput u = kNominalInput,
                                         ProcessOutput target = kNominalOutput, int layer_index = 1) {
  const double temp = steady_temperature(cfg, u.v_w, layer_index);
  auto residual = [&](double k_a, double k_w) {
    cfg.k_a = k_a;
    cfg.k_w = k_w;
    const ProcessOutput y = bead_geometry(cfg, temp, u);
    return std::array<double, 2>{y.delta_h - target.delta_h, y.w - target.w};
  };
  CalibrationResult res{cfg.k_a, cfg.k_w, 0, 0.0};
  for (; res.iterations < 100; ++res.iterations) {
    const auto r = residual(res.k_a, res.k_w);
    res.residual = std::hypot(r[0], r[1]);
    if (res.residual < 1e-14) break;
    const double ha = 1e-7 * std::max(1.0, std::abs(res.k_a));
    const double hw = 1e-7 * std::max(1.0, std::abs(res.k_w));
    const auto ra = residual(res.k_a + ha, res.k_w);
    const auto rw = residual(res.k_a, res.k_w + hw);
    const double j00 = (ra[0] - r[0]) / ha, j10 = (ra[1] - r[1]) / ha;
    const double j01 = (rw[0] - r[0]) / hw, j11 = (rw[1] - r[1]) / hw;
    const double det = j00 * j11 - j01 * j10;
    if (std::abs(det) < 1e-300) fail(ErrorKind::numeric_fault, "calibrate_plant: singular Jacobian");
    res.k_a -= (j11 * r[0] - j01 * r[1]) / det;
    res.k_w -= (-j10 * r[0] + j00 * r[1]) / det;
  }
  return res;
}

}  // namespace waam
