#pragma once
// Spatial bookkeeping for a single-bead wall: path positions, per-layer
// traces, accumulated height profiles and edge masks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "waam/core.hpp"

namespace waam {

enum class Direction { forward, reverse };

inline Direction toggled(Direction d) { return d == Direction::forward ? Direction::reverse : Direction::forward; }

inline const char* to_string(Direction d) { return d == Direction::forward ? "forward" : "reverse"; }

/// Direction of layer i under back-and-forth printing (layer 1 runs forward).
inline Direction direction_for_layer(int layer_index) {
  return (layer_index % 2 == 1) ? Direction::forward : Direction::reverse;
}

/// Positions recorded by the plant are snapped to a 2^-30 mm lattice so that
/// reflecting about an integer wall length is exact in double precision.
inline constexpr double kPositionQuantum = 0x1.0p-30;

inline double quantize_position(double s) { return std::round(s / kPositionQuantum) * kPositionQuantum; }

inline double advance_position(double s, double v_t, double t_s) {
  if (!all_finite({s, v_t, t_s})) fail(ErrorKind::invalid_argument, "advance_position: non-finite input");
  require(s >= 0.0 && v_t >= 0.0 && t_s > 0.0, "advance_position: requires s >= 0, v_T >= 0, t_s > 0");
  return s + v_t * t_s;
}

struct TraceSample {
  double t = 0.0;  ///< seconds since arc-on
  double s = 0.0;  ///< mm along the path, in the trace's direction frame
  ProcessInput u;
  ProcessOutput y;
  friend bool operator==(const TraceSample&, const TraceSample&) = default;
};

/// One deposited layer. Positions increase in traversal order; for a reverse
/// layer the physical wall coordinate is L - s.
struct LayerTrace {
  int layer_index = 1;
  double t_s = 0.1;
  Direction direction = Direction::forward;
  std::vector<TraceSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  friend bool operator==(const LayerTrace&, const LayerTrace&) = default;
};

inline LayerTrace flip_trace(const LayerTrace& trace, double length) {
  LayerTrace out;
  out.layer_index = trace.layer_index;
  out.t_s = trace.t_s;
  out.direction = toggled(trace.direction);
  out.samples.assign(trace.samples.rbegin(), trace.samples.rend());
  for (auto& smp : out.samples) smp.s = length - smp.s;
  return out;
}

/// Height of the build over a uniform grid in the physical (forward) frame.
class HeightProfile {
 public:
  HeightProfile() = default;

  /// Flat substrate (layer 0) over [0, length].
  static HeightProfile substrate(double length, double spacing = 0.5) {
    require(std::isfinite(length) && length > 0.0, "HeightProfile: length must be positive");
    require(std::isfinite(spacing) && spacing > 0.0 && spacing <= length, "HeightProfile: bad spacing");
    HeightProfile p;
    const auto intervals = static_cast<std::size_t>(std::llround(length / spacing));
    p.length_ = length;
    p.spacing_ = length / static_cast<double>(intervals);
    p.heights_.assign(intervals + 1, 0.0);
    return p;
  }

  HeightProfile(double length, std::vector<double> heights, int layer_index)
      : length_(length), heights_(std::move(heights)), layer_index_(layer_index) {
    require(heights_.size() >= 2, "HeightProfile: need at least two grid points");
    require(std::isfinite(length_) && length_ > 0.0, "HeightProfile: length must be positive");
    for (double h : heights_) require(std::isfinite(h) && h >= 0.0, "HeightProfile: heights must be finite and >= 0");
    spacing_ = length_ / static_cast<double>(heights_.size() - 1);
  }

  double length() const { return length_; }
  double spacing() const { return spacing_; }
  int layer_index() const { return layer_index_; }
  std::size_t size() const { return heights_.size(); }
  std::span<const double> heights() const { return heights_; }
  double height(std::size_t i) const { return heights_[i]; }

  double position(std::size_t i) const {
    return i + 1 == heights_.size() ? length_ : static_cast<double>(i) * spacing_;
  }

  /// The same surface expressed in the reverse frame (s -> L - s).
  HeightProfile mirrored() const {
    HeightProfile p = *this;
    std::reverse(p.heights_.begin(), p.heights_.end());
    return p;
  }

  friend HeightProfile accumulate_layer(const HeightProfile& prev, const LayerTrace& trace);
  friend bool operator==(const HeightProfile&, const HeightProfile&) = default;

 private:
  double length_ = 0.0;
  double spacing_ = 0.0;
  std::vector<double> heights_;
  int layer_index_ = 0;
};

namespace detail {

/// Piecewise-linear interpolation through (xs, ys) with xs strictly
/// increasing; constant extrapolation beyond either end.
inline double interp_clamped(std::span<const double> xs, std::span<const double> ys, double x) {
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
  const std::size_t lo = hi - 1;
  if (x == xs[lo]) return ys[lo];
  const double frac = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + frac * (ys[hi] - ys[lo]);
}

}  // namespace detail

inline double interpolate_height(const HeightProfile& profile, double s) {
  if (!std::isfinite(s) || s < 0.0 || s > profile.length())
    fail(ErrorKind::invalid_argument, "interpolate_height: position " + std::to_string(s) + " outside [0, L]");
  const std::size_t last = profile.size() - 1;
  auto j = std::min(static_cast<std::size_t>(std::floor(s / profile.spacing())), last - 1);
  // floor() of the quotient can land one cell off near grid points
  while (j + 1 < last && s >= profile.position(j + 1)) ++j;
  while (j > 0 && s < profile.position(j)) --j;
  const double x0 = profile.position(j);
  const double x1 = profile.position(j + 1);
  if (s == x0) return profile.height(j);
  if (s == x1) return profile.height(j + 1);
  const double frac = (s - x0) / (x1 - x0);
  return profile.height(j) + frac * (profile.height(j + 1) - profile.height(j));
}

inline HeightProfile accumulate_layer(const HeightProfile& prev, const LayerTrace& trace) {
  if (trace.empty()) fail(ErrorKind::invalid_argument, "accumulate_layer: empty trace");
  require(trace.layer_index == prev.layer_index() + 1, "accumulate_layer: trace layer must follow the profile layer");

  const LayerTrace physical = trace.direction == Direction::forward ? trace : flip_trace(trace, prev.length());
  std::vector<double> xs, dh;
  xs.reserve(physical.size());
  dh.reserve(physical.size());
  for (const auto& smp : physical.samples) {
    xs.push_back(smp.s);
    dh.push_back(smp.y.delta_h);
  }

  HeightProfile next = prev;
  for (std::size_t i = 0; i < next.size(); ++i)
    next.heights_[i] = prev.heights_[i] + detail::interp_clamped(xs, dh, prev.position(i));
  next.layer_index_ = trace.layer_index;
  return next;
}

/// True marks a sample within `margin` of the arc-on or arc-off point.
inline std::vector<bool> edge_mask(std::span<const double> positions, double length, double margin) {
  require(margin >= 0.0 && margin < length / 2.0, "edge_mask: margin must be in [0, L/2)");
  std::vector<bool> mask(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    mask[i] = positions[i] < margin || positions[i] > length - margin;
  return mask;
}

inline std::vector<double> positions_of(const LayerTrace& trace) {
  std::vector<double> s;
  s.reserve(trace.size());
  for (const auto& smp : trace.samples) s.push_back(smp.s);
  return s;
}

/// Checks the structural invariants of a trace; returns an empty string when valid.
inline std::string validate_trace(const LayerTrace& trace, double length) {
  if (trace.layer_index < 1) return "layer index must be >= 1";
  if (!(trace.t_s > 0.0)) return "sampling period must be positive";
  for (std::size_t k = 0; k < trace.size(); ++k) {
    const auto& smp = trace.samples[k];
    if (!all_finite({smp.t, smp.s, smp.u.v_t, smp.u.v_w, smp.y.delta_h, smp.y.w}))
      return "non-finite value at sample " + std::to_string(k);
    if (smp.s < 0.0 || smp.s > length) return "position outside [0, L] at sample " + std::to_string(k);
    if (k > 0 && !(smp.s > trace.samples[k - 1].s)) return "positions not strictly increasing at sample " + std::to_string(k);
  }
  return {};
}

}  // namespace waam
