#pragma once
// Shared value types, error kinds and the seeded random stream used by every
// other waam header.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace waam {

enum class ErrorKind {
  invalid_argument,
  numeric_fault,
  unsupported,
  degenerate_fit,
  degenerate_model,
  empty_after_mask,
  data_error,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::numeric_fault: return "numeric-fault";
    case ErrorKind::unsupported: return "unsupported";
    case ErrorKind::degenerate_fit: return "degenerate-fit";
    case ErrorKind::degenerate_model: return "degenerate-model";
    case ErrorKind::empty_after_mask: return "empty-after-mask";
    case ErrorKind::data_error: return "data-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

inline bool all_finite(std::initializer_list<double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Torch speed and wire feed rate, both mm/s.
struct ProcessInput {
  double v_t = 0.0;
  double v_w = 0.0;

  /// Volume per distance.
  double vpd() const { return v_w / v_t; }
  friend bool operator==(const ProcessInput&, const ProcessInput&) = default;
};

/// Layer height increment and bead width, both mm.
struct ProcessOutput {
  double delta_h = 0.0;
  double w = 0.0;
  friend bool operator==(const ProcessOutput&, const ProcessOutput&) = default;
};

/// Box on (v_T, v_W); defaults are the safe operating limits.
struct InputBounds {
  ProcessInput lo{2.0, 21.2};
  ProcessInput hi{15.0, 105.8};

  bool contains(const ProcessInput& u, double tol = 0.0) const {
    return u.v_t >= lo.v_t - tol && u.v_t <= hi.v_t + tol && u.v_w >= lo.v_w - tol && u.v_w <= hi.v_w + tol;
  }
  ProcessInput clamp(const ProcessInput& u) const {
    return {std::clamp(u.v_t, lo.v_t, hi.v_t), std::clamp(u.v_w, lo.v_w, hi.v_w)};
  }
};

/// splitmix64-seeded xoshiro256** with a Box-Muller normal. Results are
/// identical on every platform, unlike the std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t z = seed;
    for (auto& s : s_) {
      z += 0x9E3779B97F4A7C15ull;
      std::uint64_t x = z;
      x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
      x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
      s = x ^ (x >> 31);
    }
    has_spare_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline constexpr const char* kToolkitVersion = "1.0.0";

}  // namespace waam
