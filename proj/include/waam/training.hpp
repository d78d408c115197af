#pragma once
// Dataset handling, mean-squared loss with reverse-mode gradients through the
// unrolled sequence, Adam, the training loop with best-validation
// checkpointing, error metrics, and drift-regularised fine-tuning.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "waam/core.hpp"
#include "waam/geometry.hpp"
#include "waam/models.hpp"
#include "waam/params.hpp"

namespace waam {

enum class Split { train, validation };

struct Dataset {
  std::vector<LayerTrace> traces;
  std::vector<Split> split;

  std::vector<LayerTrace> part(Split which) const {
    std::vector<LayerTrace> out;
    for (std::size_t i = 0; i < traces.size(); ++i)
      if (split[i] == which) out.push_back(traces[i]);
    return out;
  }
  std::vector<LayerTrace> train() const { return part(Split::train); }
  std::vector<LayerTrace> validation() const { return part(Split::validation); }
};

/// Random permutation by seed; the first ceil(ratio * N) traces train, but at
/// least one trace is always held out.
inline Dataset split_dataset(std::vector<LayerTrace> traces, double ratio = 0.8, std::uint64_t seed = 0) {
  if (traces.size() < 2) fail(ErrorKind::invalid_argument, "split_dataset: need at least 2 traces");
  require(ratio > 0.0 && ratio < 1.0, "split_dataset: ratio must be in (0, 1)");
  const std::size_t n = traces.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const auto n_train = std::min<std::size_t>(static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-12)), n - 1);
  Dataset ds;
  ds.split.assign(n, Split::validation);
  for (std::size_t i = 0; i < n_train; ++i) ds.split[order[i]] = Split::train;
  ds.traces = std::move(traces);
  return ds;
}

/// Population mean and standard deviation per channel over every sample.
inline NormStats compute_norm_stats(std::span<const LayerTrace> traces) {
  Eigen::Vector4d sum = Eigen::Vector4d::Zero(), sq = Eigen::Vector4d::Zero();
  double count = 0.0;
  for (const auto& tr : traces)
    for (const auto& smp : tr.samples) {
      const Eigen::Vector4d v{smp.u.v_t, smp.u.v_w, smp.y.delta_h, smp.y.w};
      sum += v;
      count += 1.0;
    }
  require(count > 0.0, "compute_norm_stats: no samples");
  const Eigen::Vector4d mean = sum / count;
  for (const auto& tr : traces)
    for (const auto& smp : tr.samples) {
      const Eigen::Vector4d v{smp.u.v_t, smp.u.v_w, smp.y.delta_h, smp.y.w};
      sq += (v - mean).cwiseAbs2();
    }
  Eigen::Vector4d sd = (sq / count).cwiseSqrt();
  for (int i = 0; i < 4; ++i)
    if (!(sd[i] > 1e-12)) sd[i] = 1.0;
  NormStats ns;
  ns.u_mean = mean.head<2>();
  ns.y_mean = mean.tail<2>();
  ns.u_std = sd.head<2>();
  ns.y_std = sd.tail<2>();
  return ns;
}

/// A trace converted to normalized model units.
struct Sequence {
  std::vector<Eigen::Vector2d> u, y;
};

inline std::vector<Sequence> to_sequences(const NormStats& ns, std::span<const LayerTrace> traces) {
  std::vector<Sequence> out(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    out[i].u.reserve(traces[i].size());
    out[i].y.reserve(traces[i].size());
    for (const auto& smp : traces[i].samples) {
      out[i].u.push_back(ns.normalize_u(smp.u));
      out[i].y.push_back(ns.normalize_y(smp.y));
    }
  }
  return out;
}

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;  ///< same layout as ModelParams::theta()
};

namespace detail {

inline std::size_t sample_count(std::span<const Sequence> seqs) {
  std::size_t n = 0;
  for (const auto& s : seqs) n += s.u.size();
  return n;
}

template <class Cell>
struct Unroller {
  std::vector<typename Cell::Cache> caches;
  std::vector<Eigen::Vector2d> dy;

  /// Adds this sequence's squared error to the running sum and, when `g` is
  /// non-null, its gradient scaled by `scale`. The trace starts from zero.
  double run(const ModelParams& p, const typename Cell::View& v, typename Cell::GradView* g, const Sequence& seq,
             int truncation, double scale) {
    const std::size_t len = seq.u.size();
    if (caches.size() < len) caches.resize(len);
    dy.resize(len);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(p.state_dim());
    double sse = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      Cell::forward(v, x, seq.u[k], caches[k]);
      x = caches[k].xn;
      const Eigen::Vector2d r = Cell::output(v, x) - seq.y[k];
      sse += r.squaredNorm();
      dy[k] = 2.0 * scale * r;
    }
    if (!g) return sse;
    Eigen::VectorXd carry = Eigen::VectorXd::Zero(p.state_dim());
    Eigen::VectorXd dxn, dx;
    for (std::size_t k = len; k-- > 0;) {
      if (truncation > 0 && (k + 1) % static_cast<std::size_t>(truncation) == 0) carry.setZero();
      dxn = carry;
      Cell::output_backward(v, caches[k].xn, dy[k], dxn, *g);
      Cell::backward(v, caches[k], dxn, dx, *g);
      carry = dx;
    }
    return sse;
  }
};

}  // namespace detail

/// Mean squared error over every normalized output sample (both channels) and,
/// optionally, its gradient. `truncation` > 0 cuts the backward pass into
/// chunks of that many steps.
inline LossGrad loss_and_gradients(const ModelParams& p, std::span<const Sequence> seqs, bool with_grad = true,
                                   int truncation = 0) {
  const std::size_t count = detail::sample_count(seqs);
  require(count > 0, "loss_and_gradients: no samples");
  LossGrad out;
  if (with_grad) out.grad = Eigen::VectorXd::Zero(p.theta().size());
  const double scale = 1.0 / (2.0 * static_cast<double>(count));
  double sse = visit_cell(p.arch(), [&](auto cell) {
    using Cell = decltype(cell);
    const auto v = Cell::view(p);
    auto g = Cell::grad_view(p, with_grad ? out.grad.data() : const_cast<double*>(p.theta().data()));
    detail::Unroller<Cell> unroll;
    double total = 0.0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const double s = unroll.run(p, v, with_grad ? &g : nullptr, seqs[i], truncation, scale);
      if (!std::isfinite(s)) fail(ErrorKind::numeric_fault, "non-finite loss on trace " + std::to_string(i));
      total += s;
    }
    return total;
  });
  out.loss = sse * scale;
  return out;
}

inline LossGrad loss_and_gradients(const ModelParams& p, std::span<const LayerTrace> traces, bool with_grad = true,
                                   int truncation = 0) {
  const auto seqs = to_sequences(p.norm(), traces);
  return loss_and_gradients(p, std::span<const Sequence>(seqs), with_grad, truncation);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m, v;
  long step = 0;

  static AdamState zeros(Eigen::Index n) { return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0}; }
};

/// Bias-corrected Adam update of `theta` in place; advances `state.step`.
inline void adam_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != theta.size()) state = AdamState::zeros(theta.size());
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  theta.array() -= cfg.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.epsilon);
}

struct TrainConfig {
  int epochs = 5000;
  AdamConfig adam;
  int batch_size = 0;   ///< traces per mini-batch; 0 trains full batch
  int truncation = 0;   ///< BPTT chunk length; 0 backpropagates the full sequence
  int eval_every = 10;  ///< epochs between validation evaluations
  std::uint64_t seed = 0;

  std::string validate() const {
    if (epochs < 1) return "epochs must be >= 1";
    if (!(adam.beta1 > 0.0 && adam.beta1 < 1.0 && adam.beta2 > 0.0 && adam.beta2 < 1.0)) return "Adam betas must be in (0, 1)";
    if (!(adam.learning_rate > 0.0)) return "learning rate must be positive";
    if (batch_size < 0 || truncation < 0 || eval_every < 1) return "batch_size, truncation >= 0 and eval_every >= 1";
    return {};
  }
};

struct LossRecord {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossRecord> history;
  int best_epoch = 0;
  double best_val_mse = 0.0;
  bool diverged = false;
};

/// Adam over `cfg.epochs`; returns the parameters with the lowest validation
/// MSE seen at an evaluation point. Divergence stops early and keeps the best
/// parameters found so far.
inline TrainResult train(Arch arch, int n, const Dataset& dataset, const TrainConfig& cfg) {
  if (const auto msg = cfg.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "TrainConfig: " + msg);
  const auto train_traces = dataset.train();
  const auto val_traces = dataset.validation();
  if (train_traces.empty() || val_traces.empty()) fail(ErrorKind::invalid_argument, "train: need train and validation traces");

  ModelParams p = model_init(arch, n, cfg.seed);
  p.norm() = compute_norm_stats(train_traces);
  const auto train_seq = to_sequences(p.norm(), train_traces);
  const auto val_seq = to_sequences(p.norm(), val_traces);

  TrainResult res;
  res.params = p;
  res.best_val_mse = std::numeric_limits<double>::infinity();
  AdamState opt = AdamState::zeros(p.theta().size());
  Rng shuffle(cfg.seed ^ 0x5DEECE66Dull);
  std::vector<std::size_t> order(train_seq.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Sequence> batch;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool evaluate = epoch % cfg.eval_every == 0 || epoch == 1 || epoch == cfg.epochs;
    double train_mse = 0.0;
    try {
      if (cfg.batch_size == 0 || static_cast<std::size_t>(cfg.batch_size) >= train_seq.size()) {
        const auto lg = loss_and_gradients(p, std::span<const Sequence>(train_seq), true, cfg.truncation);
        train_mse = lg.loss;
        if (evaluate) {
          const double val = loss_and_gradients(p, std::span<const Sequence>(val_seq), false).loss;
          res.history.push_back({epoch, train_mse, val});
          if (val < res.best_val_mse) {
            res.best_val_mse = val;
            res.best_epoch = epoch;
            res.params = p;
          }
        }
        if (!lg.grad.allFinite()) fail(ErrorKind::numeric_fault, "non-finite gradient");
        adam_step(p.theta(), lg.grad, opt, cfg.adam);
      } else {
        if (evaluate) {
          train_mse = loss_and_gradients(p, std::span<const Sequence>(train_seq), false).loss;
          const double val = loss_and_gradients(p, std::span<const Sequence>(val_seq), false).loss;
          res.history.push_back({epoch, train_mse, val});
          if (val < res.best_val_mse) {
            res.best_val_mse = val;
            res.best_epoch = epoch;
            res.params = p;
          }
        }
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
          batch.clear();
          for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j) batch.push_back(train_seq[order[j]]);
          const auto lg = loss_and_gradients(p, std::span<const Sequence>(batch), true, cfg.truncation);
          if (!lg.grad.allFinite()) fail(ErrorKind::numeric_fault, "non-finite gradient");
          adam_step(p.theta(), lg.grad, opt, cfg.adam);
        }
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric_fault) throw;
      res.diverged = true;
      res.history.push_back({epoch, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()});
      break;
    }
  }
  return res;
}

struct ErrorStats {
  Eigen::Vector2d mae = Eigen::Vector2d::Zero();  ///< mm, (delta_h, w)
  Eigen::Vector2d p95 = Eigen::Vector2d::Zero();  ///< mm, nearest-rank 95th percentile of |error|
  std::size_t count = 0;
};

/// Nearest-rank percentile (q in (0, 1]) of a non-empty sample.
inline double nearest_rank_percentile(std::vector<double> values, double q) {
  require(!values.empty(), "percentile of empty sample");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size()) - 1e-12));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

/// Free-run prediction errors from the zero state, in physical units.
inline ErrorStats evaluate_errors(const ModelParams& p, std::span<const LayerTrace> traces) {
  std::vector<double> eh, ew;
  for (const auto& tr : traces) {
    std::vector<ProcessInput> u;
    u.reserve(tr.size());
    for (const auto& smp : tr.samples) u.push_back(smp.u);
    const auto yhat = rollout(p, u);
    for (std::size_t k = 0; k < tr.size(); ++k) {
      eh.push_back(std::abs(yhat[k].delta_h - tr.samples[k].y.delta_h));
      ew.push_back(std::abs(yhat[k].w - tr.samples[k].y.w));
    }
  }
  require(!eh.empty(), "evaluate_errors: no samples");
  ErrorStats s;
  s.count = eh.size();
  s.mae = {std::accumulate(eh.begin(), eh.end(), 0.0) / eh.size(), std::accumulate(ew.begin(), ew.end(), 0.0) / ew.size()};
  s.p95 = {nearest_rank_percentile(eh, 0.95), nearest_rank_percentile(ew, 0.95)};
  return s;
}

struct FineTuneConfig {
  double lambda = 1e-3;
  int epochs = 200;
  double learning_rate = 3e-4;
  int window = 1;  ///< number of most recent layers used
};

struct FineTuneResult {
  ModelParams params;
  double loss = 0.0;  ///< regularised objective at the returned parameters
};

/// Minimises MSE over `layers` plus lambda * ||theta - theta_start||^2 by Adam
/// from theta_start and returns the iterate with the lowest objective
/// (possibly theta_start itself). Normalization statistics stay frozen.
inline FineTuneResult fine_tune(const ModelParams& start, std::span<const LayerTrace> layers, const FineTuneConfig& cfg) {
  require(!layers.empty(), "fine_tune: no layer data");
  require(std::isfinite(cfg.lambda) && cfg.lambda >= 0.0, "fine_tune: lambda must be finite and >= 0");
  require(cfg.epochs >= 0 && cfg.learning_rate > 0.0, "fine_tune: bad schedule");
  const auto seqs = to_sequences(start.norm(), layers);
  ModelParams p = start;
  AdamState opt = AdamState::zeros(p.theta().size());
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  FineTuneResult best{start, std::numeric_limits<double>::infinity()};
  for (int e = 0; e <= cfg.epochs; ++e) {
    auto lg = loss_and_gradients(p, std::span<const Sequence>(seqs), e < cfg.epochs);
    const double objective = lg.loss + cfg.lambda * (p.theta() - start.theta()).squaredNorm();
    if (objective < best.loss) best = {p, objective};
    if (e == cfg.epochs) break;
    lg.grad += 2.0 * cfg.lambda * (p.theta() - start.theta());
    if (!lg.grad.allFinite()) fail(ErrorKind::numeric_fault, "fine_tune: non-finite gradient");
    adam_step(p.theta(), lg.grad, opt, adam);
  }
  return best;
}

inline FineTuneResult fine_tune(const ModelParams& start, const LayerTrace& prev_layer, const FineTuneConfig& cfg) {
  return fine_tune(start, std::span<const LayerTrace>(&prev_layer, 1), cfg);
}

}  // namespace waam
