#pragma once
// Flat parameter storage for every model family. All weights live in a single
// vector so the optimizer and the drift penalty see one contiguous theta;
// named blocks are row-major views into it.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "waam/core.hpp"

namespace waam {

enum class Arch { rnn, lstm, gru, narx, loglog };

inline const char* to_string(Arch a) {
  switch (a) {
    case Arch::rnn: return "rnn";
    case Arch::lstm: return "lstm";
    case Arch::gru: return "gru";
    case Arch::narx: return "narx";
    case Arch::loglog: return "loglog";
  }
  return "unknown";
}

inline Arch parse_arch(std::string_view s) {
  if (s == "rnn") return Arch::rnn;
  if (s == "lstm") return Arch::lstm;
  if (s == "gru") return Arch::gru;
  if (s == "narx") return Arch::narx;
  if (s == "loglog") return Arch::loglog;
  fail(ErrorKind::invalid_argument, "unsupported architecture '" + std::string(s) + "'");
}

inline bool is_recurrent(Arch a) { return a == Arch::rnn || a == Arch::lstm || a == Arch::gru; }
inline bool is_trainable(Arch a) { return a != Arch::loglog; }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <bool Const>
using MatMap = Eigen::Map<std::conditional_t<Const, const RowMat, RowMat>>;
template <bool Const>
using VecMap = Eigen::Map<std::conditional_t<Const, const Eigen::VectorXd, Eigen::VectorXd>>;

/// Per-channel z-score statistics (channel 0: v_T or delta_h, channel 1: v_W or w).
struct NormStats {
  Eigen::Vector2d u_mean = Eigen::Vector2d::Zero();
  Eigen::Vector2d u_std = Eigen::Vector2d::Ones();
  Eigen::Vector2d y_mean = Eigen::Vector2d::Zero();
  Eigen::Vector2d y_std = Eigen::Vector2d::Ones();

  Eigen::Vector2d normalize_u(const ProcessInput& u) const {
    return {(u.v_t - u_mean[0]) / u_std[0], (u.v_w - u_mean[1]) / u_std[1]};
  }
  ProcessInput denormalize_u(const Eigen::Vector2d& v) const {
    return {v[0] * u_std[0] + u_mean[0], v[1] * u_std[1] + u_mean[1]};
  }
  Eigen::Vector2d normalize_y(const ProcessOutput& y) const {
    return {(y.delta_h - y_mean[0]) / y_std[0], (y.w - y_mean[1]) / y_std[1]};
  }
  ProcessOutput denormalize_y(const Eigen::Vector2d& v) const {
    return {v[0] * y_std[0] + y_mean[0], v[1] * y_std[1] + y_mean[1]};
  }
  bool valid() const {
    return u_mean.allFinite() && y_mean.allFinite() && u_std.allFinite() && y_std.allFinite() &&
           (u_std.array() > 0.0).all() && (y_std.array() > 0.0).all();
  }
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

struct Block {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
  Eigen::Index size() const { return rows * cols; }
  friend bool operator==(const Block&, const Block&) = default;
};

/// Width of both hidden layers of the NARX network.
inline constexpr int kNarxHidden = 16;

class ModelParams {
 public:
  ModelParams() = default;

  /// Zero-filled parameters with the layout of `arch`. `n` is the hidden size
  /// (rnn/lstm/gru) or the regressor history length (narx).
  static ModelParams zeros(Arch arch, int n, int narx_hidden = kNarxHidden) {
    require(n >= 1 && n <= 512, "model size must be in [1, 512]");
    ModelParams p;
    p.arch_ = arch;
    p.n_ = arch == Arch::loglog ? 0 : n;
    p.hidden_ = arch == Arch::narx ? narx_hidden : p.n_;
    const Eigen::Index m = n;
    switch (arch) {
      case Arch::rnn: p.add_recurrent({"W_ih", "W_hh", "b_h", "W_ho", "b_o"}, m, 1); break;
      case Arch::lstm: p.add_recurrent({"W_i", "W_h", "b", "W_yh", "b_y"}, m, 4); break;
      case Arch::gru: p.add_recurrent({"W_i", "W_h", "b", "W_yh", "b_y"}, m, 3); break;
      case Arch::narx: {
        const Eigen::Index h = narx_hidden;
        require(narx_hidden >= 1, "narx hidden width must be >= 1");
        p.add("W_1", h, 4 * m);
        p.add("b_1", h, 1);
        p.add("W_2", h, h);
        p.add("b_2", h, 1);
        p.add("W_3", 2, h);
        p.add("b_3", 2, 1);
        break;
      }
      case Arch::loglog:
        p.add("alpha", 3, 1);
        p.add("beta", 3, 1);
        break;
    }
    p.theta_ = Eigen::VectorXd::Zero(p.total_);
    return p;
  }

  Arch arch() const { return arch_; }
  int n() const { return n_; }
  int narx_hidden() const { return hidden_; }

  /// Length of the internal state vector (lstm stacks hidden and cell; narx
  /// holds n past outputs and n-1 past inputs).
  int state_dim() const {
    switch (arch_) {
      case Arch::rnn:
      case Arch::gru: return n_;
      case Arch::lstm: return 2 * n_;
      case Arch::narx: return 4 * n_ - 2;
      case Arch::loglog: return 0;
    }
    return 0;
  }
  /// Length of the hidden vector bounded by the activation range.
  int hidden_dim() const { return arch_ == Arch::narx || arch_ == Arch::loglog ? 0 : n_; }

  const std::vector<Block>& blocks() const { return blocks_; }
  const Block& block(std::size_t i) const { return blocks_[i]; }
  const Block& block(std::string_view name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    fail(ErrorKind::invalid_argument, "no parameter block named '" + std::string(name) + "'");
  }

  MatMap<true> view(std::size_t i) const {
    const auto& b = blocks_[i];
    return {theta_.data() + b.offset, b.rows, b.cols};
  }
  MatMap<false> view(std::size_t i) {
    const auto& b = blocks_[i];
    return {theta_.data() + b.offset, b.rows, b.cols};
  }

  const Eigen::VectorXd& theta() const { return theta_; }
  Eigen::VectorXd& theta() { return theta_; }

  const NormStats& norm() const { return norm_; }
  NormStats& norm() { return norm_; }

  bool consistent() const {
    return theta_.size() == total_ && theta_.allFinite() && norm_.valid();
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    blocks_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
  }
  void add_recurrent(std::array<const char*, 5> names, Eigen::Index n, Eigen::Index gates) {
    add(names[0], gates * n, 2);
    add(names[1], gates * n, n);
    add(names[2], gates * n, 1);
    add(names[3], 2, n);
    add(names[4], 2, 1);
  }

  Arch arch_ = Arch::rnn;
  int n_ = 0;
  int hidden_ = 0;
  std::vector<Block> blocks_;
  Eigen::Index total_ = 0;
  Eigen::VectorXd theta_;
  NormStats norm_;
};

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
inline ModelParams model_init(Arch arch, int n, std::uint64_t seed) {
  if (!is_trainable(arch)) fail(ErrorKind::invalid_argument, "model_init: loglog coefficients are fitted, not initialised");
  ModelParams p = ModelParams::zeros(arch, n);
  Rng rng(seed);
  for (std::size_t i = 0; i < p.blocks().size(); ++i) {
    const Block& b = p.block(i);
    if (b.cols == 1) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
    auto w = p.view(i);
    for (Eigen::Index r = 0; r < b.rows; ++r)
      for (Eigen::Index c = 0; c < b.cols; ++c) w(r, c) = rng.uniform(-bound, bound);
  }
  return p;
}

}  // namespace waam
