#pragma once
// Open-loop excitation builds for system identification: one build per wire
// feed level, torch speed stepped piecewise-constant inside each layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "waam/core.hpp"
#include "waam/geometry.hpp"
#include "waam/plant.hpp"

namespace waam {

struct CoverageLevel {
  double v_w = 0.0;
  /// v_T held for `hold_s` each; cycled if a layer is longer. Empty draws
  /// random levels in the VPD-limited range.
  std::vector<double> v_t_schedule;
};

struct CoverageSpec {
  std::vector<CoverageLevel> levels;
  int layers_per_build = 4;
  double hold_s = 2.0;       ///< s per torch speed level
  double vpd_min = 5.0;      ///< random v_T stays in [v_W / vpd_max, v_W / vpd_min]
  double vpd_max = 14.0;
  double wire_dither = 0.0;  ///< half-width of a uniform v_W perturbation per hold
  double interlayer_wait = 45.0;
  InputBounds bounds;

  /// `count` wire feed levels evenly spaced over the input box.
  static CoverageSpec even(int count = 21, int layers = 4) {
    CoverageSpec spec;
    spec.layers_per_build = layers;
    for (int i = 0; i < count; ++i) {
      const double f = count == 1 ? 0.5 : static_cast<double>(i) / (count - 1);
      spec.levels.push_back({spec.bounds.lo.v_w + f * (spec.bounds.hi.v_w - spec.bounds.lo.v_w), {}});
    }
    return spec;
  }

  std::string validate() const {
    if (levels.empty()) return "coverage lists no wire feed levels";
    if (layers_per_build < 1) return "layers_per_build must be >= 1";
    if (!(hold_s > 0.0) || !(vpd_min > 0.0) || !(vpd_max >= vpd_min) || wire_dither < 0.0 || interlayer_wait < 0.0)
      return "bad hold time, VPD range, dither or wait";
    for (const auto& lv : levels) {
      if (!(lv.v_w >= bounds.lo.v_w && lv.v_w <= bounds.hi.v_w)) return "wire feed level outside the input bounds";
      if (lv.v_w + wire_dither > bounds.hi.v_w || lv.v_w - wire_dither < bounds.lo.v_w)
        return "wire dither leaves the input bounds";
      for (double v : lv.v_t_schedule)
        if (!(v >= bounds.lo.v_t && v <= bounds.hi.v_t)) return "torch speed schedule outside the input bounds";
    }
    return {};
  }
};

/// Torch speed range that keeps VPD inside [vpd_min, vpd_max] and v_T inside the box.
inline std::pair<double, double> torch_range(const CoverageSpec& spec, double v_w) {
  const double lo = std::max(spec.bounds.lo.v_t, v_w / spec.vpd_max);
  const double hi = std::min(spec.bounds.hi.v_t, v_w / spec.vpd_min);
  return lo <= hi ? std::pair{lo, hi} : std::pair{spec.bounds.lo.v_t, spec.bounds.hi.v_t};
}

/// Runs one build per coverage level. Build b uses plant seed base_seed + b;
/// input draws come from a separate stream so they do not depend on noise.
inline std::vector<std::vector<LayerTrace>> generate_builds(const PlantConfig& base, const CoverageSpec& spec,
                                                            std::uint64_t seed) {
  if (const auto msg = spec.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "coverage: " + msg);
  std::vector<std::vector<LayerTrace>> builds;
  const int hold = std::max(1, static_cast<int>(std::lround(spec.hold_s / base.t_s)));
  for (std::size_t b = 0; b < spec.levels.size(); ++b) {
    const auto& lv = spec.levels[b];
    PlantConfig cfg = base;
    cfg.seed = seed * 1000003ull + b;
    PlantState st = PlantState::initial(cfg);
    Rng draw(cfg.seed ^ 0xA5A5A5A5DEADBEEFull);
    const auto [lo, hi] = torch_range(spec, lv.v_w);
    std::vector<LayerTrace> layers;
    for (int l = 0; l < spec.layers_per_build; ++l) {
      ProcessInput held{};
      std::size_t sched = 0;
      auto source = [&](const StepContext& ctx) {
        if (ctx.k % hold == 0) {
          if (lv.v_t_schedule.empty()) {
            held.v_t = draw.uniform(lo, hi);
          } else {
            held.v_t = lv.v_t_schedule[sched % lv.v_t_schedule.size()];
            ++sched;
          }
          held.v_w = lv.v_w + (spec.wire_dither > 0.0 ? draw.uniform(-spec.wire_dither, spec.wire_dither) : 0.0);
        }
        return held;
      };
      layers.push_back(run_layer(st, cfg, InputSource{InputCallback(source)}));
      interlayer_wait(st, cfg, spec.interlayer_wait);
    }
    builds.push_back(std::move(layers));
  }
  return builds;
}

}  // namespace waam
