#pragma once
// Sequence models in normalized units. Every family is written as a state
// update x' = f(x, u) followed by an output map y = g(x'), so the one-step
// prediction C f(x_k, u_k) + d is exactly what model_step emits.
//
// Cells expose forward (with a cache for reverse mode), backward, and the
// closed-form input and state Jacobians used by the controller.

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <vector>

#include "waam/core.hpp"
#include "waam/loglog.hpp"
#include "waam/params.hpp"

namespace waam {

namespace detail {

inline Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& z) { return 1.0 / (1.0 + (-z).exp()); }

template <bool Const>
struct RecurrentView {
  MatMap<Const> w_in, w_rec;
  VecMap<Const> b;
  MatMap<Const> c;
  VecMap<Const> d;
};

template <bool Const>
struct NarxView {
  MatMap<Const> w1;
  VecMap<Const> b1;
  MatMap<Const> w2;
  VecMap<Const> b2;
  MatMap<Const> w3;
  VecMap<Const> b3;
};

template <bool Const, class Ptr>
RecurrentView<Const> recurrent_view(const ModelParams& p, Ptr base) {
  const auto& bl = p.blocks();
  return {{base + bl[0].offset, bl[0].rows, bl[0].cols}, {base + bl[1].offset, bl[1].rows, bl[1].cols},
          {base + bl[2].offset, bl[2].rows},             {base + bl[3].offset, bl[3].rows, bl[3].cols},
          {base + bl[4].offset, bl[4].rows}};
}

template <bool Const, class Ptr>
NarxView<Const> narx_view(const ModelParams& p, Ptr base) {
  const auto& bl = p.blocks();
  return {{base + bl[0].offset, bl[0].rows, bl[0].cols}, {base + bl[1].offset, bl[1].rows},
          {base + bl[2].offset, bl[2].rows, bl[2].cols}, {base + bl[3].offset, bl[3].rows},
          {base + bl[4].offset, bl[4].rows, bl[4].cols}, {base + bl[5].offset, bl[5].rows}};
}

/// Shared affine readout y = C h' + d for the three recurrent families.
struct AffineReadout {
  static Eigen::Vector2d output(const RecurrentView<true>& v, const Eigen::VectorXd& xn) {
    return v.c * xn.head(v.c.cols()) + v.d;
  }
  static void output_backward(const RecurrentView<true>& v, const Eigen::VectorXd& xn, const Eigen::Vector2d& dy,
                              Eigen::VectorXd& dxn, RecurrentView<false>& g) {
    const auto n = v.c.cols();
    dxn.head(n).noalias() += v.c.transpose() * dy;
    g.c.noalias() += dy * xn.head(n).transpose();
    g.d += dy;
  }
};

}  // namespace detail

/// x' = tanh(W_ih u + W_hh x + b_h), y = W_ho x' + b_o
struct RnnCell : detail::AffineReadout {
  using View = detail::RecurrentView<true>;
  using GradView = detail::RecurrentView<false>;
  struct Cache {
    Eigen::VectorXd x, xn;
    Eigen::Vector2d u;
  };

  static View view(const ModelParams& p) { return detail::recurrent_view<true>(p, p.theta().data()); }
  static GradView grad_view(const ModelParams& p, double* g) { return detail::recurrent_view<false>(p, g); }

  static void forward(const View& v, const Eigen::VectorXd& x, const Eigen::Vector2d& u, Cache& c) {
    c.x = x;
    c.u = u;
    c.xn = (v.w_in * u + v.w_rec * x + v.b).array().tanh();
  }

  static void backward(const View& v, const Cache& c, const Eigen::VectorXd& dxn, Eigen::VectorXd& dx, GradView& g) {
    const Eigen::VectorXd da = dxn.array() * (1.0 - c.xn.array().square());
    g.w_in.noalias() += da * c.u.transpose();
    g.w_rec.noalias() += da * c.x.transpose();
    g.b += da;
    dx.noalias() = v.w_rec.transpose() * da;
  }

  /// d x' / d u
  static Eigen::MatrixXd input_sensitivity(const View& v, const Cache& c) {
    return (1.0 - c.xn.array().square()).matrix().asDiagonal() * v.w_in;
  }

  static Eigen::MatrixXd state_matrix(const View& v, const Cache& c) {
    return (1.0 - c.xn.array().square()).matrix().asDiagonal() * v.w_rec;
  }
};

/// Gates stacked in the order input, forget, cell candidate, output; the
/// state vector is [h; c].
struct LstmCell : detail::AffineReadout {
  using View = detail::RecurrentView<true>;
  using GradView = detail::RecurrentView<false>;
  struct Cache {
    Eigen::VectorXd h, cell, i, f, g, o, cn, tc, xn;
    Eigen::Vector2d u;
  };

  static View view(const ModelParams& p) { return detail::recurrent_view<true>(p, p.theta().data()); }
  static GradView grad_view(const ModelParams& p, double* g) { return detail::recurrent_view<false>(p, g); }

  static void forward(const View& v, const Eigen::VectorXd& x, const Eigen::Vector2d& u, Cache& c) {
    const auto n = v.c.cols();
    c.h = x.head(n);
    c.cell = x.tail(n);
    c.u = u;
    const Eigen::VectorXd z = v.w_in * u + v.w_rec * c.h + v.b;
    c.i = detail::sigmoid(z.segment(0, n).array());
    c.f = detail::sigmoid(z.segment(n, n).array());
    c.g = z.segment(2 * n, n).array().tanh();
    c.o = detail::sigmoid(z.segment(3 * n, n).array());
    c.cn = c.f.cwiseProduct(c.cell) + c.i.cwiseProduct(c.g);
    c.tc = c.cn.array().tanh();
    c.xn.resize(2 * n);
    c.xn.head(n) = c.o.cwiseProduct(c.tc);
    c.xn.tail(n) = c.cn;
  }

  static void backward(const View& v, const Cache& c, const Eigen::VectorXd& dxn, Eigen::VectorXd& dx, GradView& g) {
    const auto n = v.c.cols();
    const Eigen::ArrayXd dh = dxn.head(n).array();
    const Eigen::ArrayXd dc = dxn.tail(n).array() + dh * c.o.array() * (1.0 - c.tc.array().square());
    Eigen::VectorXd dz(4 * n);
    dz.segment(0, n) = dc * c.g.array() * c.i.array() * (1.0 - c.i.array());
    dz.segment(n, n) = dc * c.cell.array() * c.f.array() * (1.0 - c.f.array());
    dz.segment(2 * n, n) = dc * c.i.array() * (1.0 - c.g.array().square());
    dz.segment(3 * n, n) = dh * c.tc.array() * c.o.array() * (1.0 - c.o.array());
    g.w_in.noalias() += dz * c.u.transpose();
    g.w_rec.noalias() += dz * c.h.transpose();
    g.b += dz;
    dx.resize(2 * n);
    dx.head(n).noalias() = v.w_rec.transpose() * dz;
    dx.tail(n) = dc * c.f.array();
  }

  // Rows of the Jacobian of (i, f, g, o) with respect to some variable, given
  // the pre-activation Jacobian dz.
  static void cell_and_hidden(const Cache& c, const Eigen::MatrixXd& dz, Eigen::MatrixXd& dcn, Eigen::MatrixXd& dhn) {
    const auto n = c.i.size();
    const Eigen::VectorXd si = c.i.array() * (1.0 - c.i.array());
    const Eigen::VectorXd sf = c.f.array() * (1.0 - c.f.array());
    const Eigen::VectorXd sg = 1.0 - c.g.array().square();
    const Eigen::VectorXd so = c.o.array() * (1.0 - c.o.array());
    dcn = (c.cell.cwiseProduct(sf)).asDiagonal() * dz.middleRows(n, n) +
          (c.g.cwiseProduct(si)).asDiagonal() * dz.middleRows(0, n) +
          (c.i.cwiseProduct(sg)).asDiagonal() * dz.middleRows(2 * n, n);
    const Eigen::VectorXd dtc = c.o.array() * (1.0 - c.tc.array().square());
    dhn = (c.tc.cwiseProduct(so)).asDiagonal() * dz.middleRows(3 * n, n) + dtc.asDiagonal() * dcn;
  }

  static Eigen::MatrixXd input_sensitivity(const View& v, const Cache& c) {
    const auto n = v.c.cols();
    Eigen::MatrixXd dcn, dhn;
    cell_and_hidden(c, v.w_in, dcn, dhn);
    Eigen::MatrixXd out(2 * n, 2);
    out << dhn, dcn;
    return out;
  }

  static Eigen::MatrixXd state_matrix(const View& v, const Cache& c) {
    const auto n = v.c.cols();
    Eigen::MatrixXd dcn_dh, dhn_dh;
    cell_and_hidden(c, v.w_rec, dcn_dh, dhn_dh);
    const Eigen::VectorXd dtc = c.o.array() * (1.0 - c.tc.array().square());
    Eigen::MatrixXd a(2 * n, 2 * n);
    a.topLeftCorner(n, n) = dhn_dh;
    a.topRightCorner(n, n) = (dtc.cwiseProduct(c.f)).asDiagonal();
    a.bottomLeftCorner(n, n) = dcn_dh;
    a.bottomRightCorner(n, n) = c.f.asDiagonal();
    return a;
  }
};

/// Update gate z, reset gate r, candidate from W_hh (r * x):
/// x' = (1 - z) * x + z * candidate. Gate rows are stacked z, r, candidate.
struct GruCell : detail::AffineReadout {
  using View = detail::RecurrentView<true>;
  using GradView = detail::RecurrentView<false>;
  struct Cache {
    Eigen::VectorXd h, z, r, rh, cand, xn;
    Eigen::Vector2d u;
  };

  static View view(const ModelParams& p) { return detail::recurrent_view<true>(p, p.theta().data()); }
  static GradView grad_view(const ModelParams& p, double* g) { return detail::recurrent_view<false>(p, g); }

  static void forward(const View& v, const Eigen::VectorXd& x, const Eigen::Vector2d& u, Cache& c) {
    const auto n = v.c.cols();
    c.h = x;
    c.u = u;
    const Eigen::VectorXd zin = v.w_in * u + v.b;
    c.z = detail::sigmoid((zin.segment(0, n) + v.w_rec.middleRows(0, n) * x).array());
    c.r = detail::sigmoid((zin.segment(n, n) + v.w_rec.middleRows(n, n) * x).array());
    c.rh = c.r.cwiseProduct(x);
    c.cand = (zin.segment(2 * n, n) + v.w_rec.middleRows(2 * n, n) * c.rh).array().tanh();
    c.xn = (1.0 - c.z.array()) * x.array() + c.z.array() * c.cand.array();
  }

  static void backward(const View& v, const Cache& c, const Eigen::VectorXd& dxn, Eigen::VectorXd& dx, GradView& g) {
    const auto n = v.c.cols();
    const Eigen::ArrayXd dzg = dxn.array() * (c.cand - c.h).array();
    const Eigen::ArrayXd dcand = dxn.array() * c.z.array();
    dx = dxn.array() * (1.0 - c.z.array());

    const Eigen::VectorXd dah = dcand * (1.0 - c.cand.array().square());
    const Eigen::VectorXd drh = v.w_rec.middleRows(2 * n, n).transpose() * dah;
    dx.array() += drh.array() * c.r.array();
    const Eigen::VectorXd daz = dzg * c.z.array() * (1.0 - c.z.array());
    const Eigen::VectorXd dar = drh.array() * c.h.array() * c.r.array() * (1.0 - c.r.array());
    dx.noalias() += v.w_rec.middleRows(0, n).transpose() * daz;
    dx.noalias() += v.w_rec.middleRows(n, n).transpose() * dar;

    g.w_in.middleRows(0, n).noalias() += daz * c.u.transpose();
    g.w_in.middleRows(n, n).noalias() += dar * c.u.transpose();
    g.w_in.middleRows(2 * n, n).noalias() += dah * c.u.transpose();
    g.w_rec.middleRows(0, n).noalias() += daz * c.h.transpose();
    g.w_rec.middleRows(n, n).noalias() += dar * c.h.transpose();
    g.w_rec.middleRows(2 * n, n).noalias() += dah * c.rh.transpose();
    g.b.segment(0, n) += daz;
    g.b.segment(n, n) += dar;
    g.b.segment(2 * n, n) += dah;
  }

  // d x' / d var, where dzin = d(gate pre-activation without the recurrent
  // candidate term) / d var and the candidate depends on var through `direct`.
  static Eigen::MatrixXd sensitivity(const View& v, const Cache& c, const Eigen::MatrixXd& dz_pre,
                                     const Eigen::MatrixXd& dr_pre, const Eigen::MatrixXd& dcand_direct,
                                     const Eigen::MatrixXd& drh_extra) {
    const auto n = v.c.cols();
    const Eigen::VectorXd sz = c.z.array() * (1.0 - c.z.array());
    const Eigen::VectorXd sr = c.r.array() * (1.0 - c.r.array());
    const Eigen::VectorXd sc = 1.0 - c.cand.array().square();
    const Eigen::MatrixXd dz = sz.asDiagonal() * dz_pre;
    const Eigen::MatrixXd dr = sr.asDiagonal() * dr_pre;
    const Eigen::MatrixXd drh = c.h.asDiagonal() * dr + drh_extra;
    const Eigen::MatrixXd dcand = sc.asDiagonal() * (dcand_direct + v.w_rec.middleRows(2 * n, n) * drh);
    return (c.cand - c.h).asDiagonal() * dz + c.z.asDiagonal() * dcand;
  }

  static Eigen::MatrixXd input_sensitivity(const View& v, const Cache& c) {
    const auto n = v.c.cols();
    return sensitivity(v, c, v.w_in.middleRows(0, n), v.w_in.middleRows(n, n), v.w_in.middleRows(2 * n, n),
                       Eigen::MatrixXd::Zero(n, 2));
  }

  static Eigen::MatrixXd state_matrix(const View& v, const Cache& c) {
    const auto n = v.c.cols();
    Eigen::MatrixXd a = sensitivity(v, c, v.w_rec.middleRows(0, n), v.w_rec.middleRows(n, n),
                                    Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd(c.r.asDiagonal()));
    a.diagonal().array() += 1.0 - c.z.array();
    return a;
  }
};

/// Two tanh layers over the regressor [y_{k-1} .. y_{k-n}, u_k .. u_{k-n+1}].
/// The state is [y_{k-1} .. y_{k-n}, u_{k-1} .. u_{k-n+1}]; the new state
/// begins with the freshly emitted output, which is also the readout.
struct NarxCell {
  using View = detail::NarxView<true>;
  using GradView = detail::NarxView<false>;
  struct Cache {
    Eigen::VectorXd phi, a1, a2, xn;
  };

  static View view(const ModelParams& p) { return detail::narx_view<true>(p, p.theta().data()); }
  static GradView grad_view(const ModelParams& p, double* g) { return detail::narx_view<false>(p, g); }

  static Eigen::Index order(const View& v) { return v.w1.cols() / 4; }

  static void forward(const View& v, const Eigen::VectorXd& x, const Eigen::Vector2d& u, Cache& c) {
    const auto n = order(v);
    c.phi.resize(4 * n);
    c.phi.head(2 * n) = x.head(2 * n);
    c.phi.segment(2 * n, 2) = u;
    c.phi.tail(2 * n - 2) = x.tail(2 * n - 2);
    c.a1 = (v.w1 * c.phi + v.b1).array().tanh();
    c.a2 = (v.w2 * c.a1 + v.b2).array().tanh();
    const Eigen::Vector2d y = v.w3 * c.a2 + v.b3;
    c.xn.resize(4 * n - 2);
    c.xn.head(2) = y;
    c.xn.segment(2, 2 * n - 2) = x.head(2 * n - 2);
    if (n > 1) {
      c.xn.segment(2 * n, 2) = u;
      c.xn.tail(2 * n - 4) = x.tail(2 * n - 2).head(2 * n - 4);
    }
  }

  static Eigen::Vector2d output(const View&, const Eigen::VectorXd& xn) { return xn.head(2); }
  static void output_backward(const View&, const Eigen::VectorXd&, const Eigen::Vector2d& dy, Eigen::VectorXd& dxn,
                              GradView&) {
    dxn.head(2) += dy;
  }

  static void backward(const View& v, const Cache& c, const Eigen::VectorXd& dxn, Eigen::VectorXd& dx, GradView& g) {
    const auto n = order(v);
    const Eigen::Vector2d dy = dxn.head(2);
    g.b3 += dy;
    g.w3.noalias() += dy * c.a2.transpose();
    const Eigen::VectorXd da2 = (v.w3.transpose() * dy).array() * (1.0 - c.a2.array().square());
    g.w2.noalias() += da2 * c.a1.transpose();
    g.b2 += da2;
    const Eigen::VectorXd da1 = (v.w2.transpose() * da2).array() * (1.0 - c.a1.array().square());
    g.w1.noalias() += da1 * c.phi.transpose();
    g.b1 += da1;
    const Eigen::VectorXd dphi = v.w1.transpose() * da1;

    dx.setZero(4 * n - 2);
    dx.head(2 * n) = dphi.head(2 * n);
    dx.tail(2 * n - 2) = dphi.tail(2 * n - 2);
    dx.head(2 * n - 2) += dxn.segment(2, 2 * n - 2);
    if (n > 1) dx.tail(2 * n - 2).head(2 * n - 4) += dxn.tail(2 * n - 4);
  }

  /// d y / d u_k (the output is the only part of x' that depends on u through the network).
  static Eigen::Matrix2d output_input_jacobian(const View& v, const Cache& c) {
    const auto n = order(v);
    const Eigen::MatrixXd d1 = (1.0 - c.a1.array().square()).matrix().asDiagonal() * v.w1.middleCols(2 * n, 2);
    const Eigen::MatrixXd d2 = (1.0 - c.a2.array().square()).matrix().asDiagonal() * (v.w2 * d1);
    return v.w3 * d2;
  }
};

/// Calls fn with a value of the cell type matching `arch`.
template <class Fn>
decltype(auto) visit_cell(Arch arch, Fn&& fn) {
  switch (arch) {
    case Arch::rnn: return fn(RnnCell{});
    case Arch::lstm: return fn(LstmCell{});
    case Arch::gru: return fn(GruCell{});
    case Arch::narx: return fn(NarxCell{});
    case Arch::loglog: break;
  }
  fail(ErrorKind::unsupported, "operation requires a sequence model, got loglog");
}

struct ModelState {
  Eigen::VectorXd x;

  static ModelState zero(const ModelParams& p) { return {Eigen::VectorXd::Zero(p.state_dim())}; }
  /// The activation-bounded part of the state (the LSTM hidden vector, not its cell).
  Eigen::VectorXd hidden(const ModelParams& p) const { return x.head(p.hidden_dim()); }
  friend bool operator==(const ModelState& a, const ModelState& b) { return a.x == b.x; }
};

namespace detail {
inline void check_state(const ModelParams& p, const ModelState& st) {
  if (st.x.size() != p.state_dim()) fail(ErrorKind::invalid_argument, "model state dimension does not match parameters");
  if (!st.x.allFinite()) fail(ErrorKind::numeric_fault, "model state is not finite");
}
}  // namespace detail

/// Advances `st` by one step on a normalized input; returns the normalized
/// output of the updated state.
inline Eigen::Vector2d model_step(const ModelParams& p, ModelState& st, const Eigen::Vector2d& u_norm) {
  detail::check_state(p, st);
  if (!u_norm.allFinite()) fail(ErrorKind::invalid_argument, "model_step: non-finite input");
  return visit_cell(p.arch(), [&](auto cell) -> Eigen::Vector2d {
    using Cell = decltype(cell);
    const auto v = Cell::view(p);
    typename Cell::Cache c;
    Cell::forward(v, st.x, u_norm, c);
    st.x = std::move(c.xn);
    return Cell::output(v, st.x);
  });
}

/// Prediction at physical units for a whole input sequence, starting from `x0`
/// (the zero state when omitted). Loglog models predict statically.
inline std::vector<ProcessOutput> rollout(const ModelParams& p, std::span<const ProcessInput> inputs,
                                          const ModelState* x0 = nullptr) {
  std::vector<ProcessOutput> out;
  out.reserve(inputs.size());
  if (p.arch() == Arch::loglog) {
    const auto m = LogLogModel::from_params(p);
    for (const auto& u : inputs) out.push_back(loglog_predict(m, u));
    return out;
  }
  ModelState st = x0 ? *x0 : ModelState::zero(p);
  for (const auto& u : inputs) out.push_back(p.norm().denormalize_y(model_step(p, st, p.norm().normalize_u(u))));
  return out;
}

/// The hidden-state trajectory x_1 .. x_N produced by `inputs` from zero.
inline std::vector<Eigen::VectorXd> state_trajectory(const ModelParams& p, std::span<const ProcessInput> inputs) {
  std::vector<Eigen::VectorXd> xs;
  xs.reserve(inputs.size());
  ModelState st = ModelState::zero(p);
  for (const auto& u : inputs) {
    model_step(p, st, p.norm().normalize_u(u));
    xs.push_back(st.x);
  }
  return xs;
}

/// Output the model would emit from state `st` under input `u`, without
/// advancing the state. Physical units.
inline ProcessOutput predict_next(const ModelParams& p, const ModelState& st, const ProcessInput& u) {
  ModelState tmp = st;
  return p.norm().denormalize_y(model_step(p, tmp, p.norm().normalize_u(u)));
}

/// d(next output)/d(current input) with the state held fixed, in mm per mm/s.
inline Eigen::Matrix2d input_jacobian(const ModelParams& p, const ModelState& st, const ProcessInput& u) {
  detail::check_state(p, st);
  const Eigen::Vector2d un = p.norm().normalize_u(u);
  const Eigen::Matrix2d jn = visit_cell(p.arch(), [&](auto cell) -> Eigen::Matrix2d {
    using Cell = decltype(cell);
    const auto v = Cell::view(p);
    typename Cell::Cache c;
    Cell::forward(v, st.x, un, c);
    if constexpr (std::is_same_v<Cell, NarxCell>) {
      return Cell::output_input_jacobian(v, c);
    } else {
      return v.c * Cell::input_sensitivity(v, c).topRows(v.c.cols());
    }
  });
  const auto& ns = p.norm();
  return ns.y_std.asDiagonal() * jn * ns.u_std.cwiseInverse().asDiagonal();
}

/// A = d x_{k+1} / d x_k at (st, u); recurrent families only.
inline Eigen::MatrixXd state_matrix(const ModelParams& p, const ModelState& st, const ProcessInput& u) {
  if (!is_recurrent(p.arch())) fail(ErrorKind::unsupported, "state_matrix: requires rnn, lstm or gru");
  detail::check_state(p, st);
  const Eigen::Vector2d un = p.norm().normalize_u(u);
  return visit_cell(p.arch(), [&](auto cell) -> Eigen::MatrixXd {
    using Cell = decltype(cell);
    if constexpr (std::is_same_v<Cell, NarxCell>) {
      return {};
    } else {
      const auto v = Cell::view(p);
      typename Cell::Cache c;
      Cell::forward(v, st.x, un, c);
      return Cell::state_matrix(v, c);
    }
  });
}

}  // namespace waam
