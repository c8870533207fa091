#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// Every node on the tape holds a matrix. Batched code keeps one sample per
// column, so a state batch is (dim x batch) and per-sample scalars are
// (1 x batch) rows. A tape serves exactly one forward pass; call clear()
// before reusing it.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "invarc/errors.hpp"

namespace invarc::ad {

using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Activation { silu, softplus, tanh };

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  const Mat& value() const;
  const Mat& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Records a node. The backward callback is kept only when some input needs
  /// a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward back) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(back));
  }

  Var record(Mat value, std::span<const Var> inputs, Backward back) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(back) : nullptr);
  }

  const Mat& value(int id) const { return nodes_[id].value; }

  /// Gradient after backward(); zeros when the node was not reached.
  const Mat& grad(int id) const {
    auto& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  template <class Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  template <class Derived>
  void accumulate_rows(int id, Index first_row, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    n.grad.middleRows(first_row, g.rows()) += g;
  }

  void backward(Var root) {
    check_owner(root);
    if (root.rows() != 1 || root.cols() != 1)
      throw ContractError("backward: loss must be a scalar (1x1) node");
    backward(root, Mat::Ones(1, 1));
  }

  void backward(Var root, const Mat& seed) {
    check_owner(root);
    if (seed.rows() != root.rows() || seed.cols() != root.cols())
      throw DimensionError("backward: seed shape differs from root");
    for (auto& n : nodes_) {
      n.has_grad = false;
    }
    auto& r = nodes_[root.id()];
    if (!r.requires_grad) return;
    r.grad = seed;
    r.has_grad = true;
    for (int i = root.id(); i >= 0; --i) {
      const auto& n = nodes_[i];
      if (n.has_grad && n.back) n.back(*this, i);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    Backward back;
    bool requires_grad = false;
    mutable bool has_grad = false;
  };

  Var push(Mat value, bool requires_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(back), requires_grad, false});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  void check_owner(const Var& v) const {
    if (!v.valid() || &v.tape() != this || v.id() >= static_cast<int>(nodes_.size()))
      throw ContractError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }
inline const Mat& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

/// k-th derivative of the activation, k in {0, 1, 2}.
inline double activation(Activation a, int k, double x) {
  switch (a) {
    case Activation::silu: {
      const double s = sigmoid(x);
      const double ds = s * (1 - s);
      if (k == 0) return x * s;
      if (k == 1) return s + x * ds;
      return ds * (2 + x * (1 - 2 * s));
    }
    case Activation::softplus: {
      if (k == 0) return softplus(x);
      const double s = sigmoid(x);
      if (k == 1) return s;
      return s * (1 - s);
    }
    case Activation::tanh: {
      const double t = std::tanh(x);
      if (k == 0) return t;
      if (k == 1) return 1 - t * t;
      return -2 * t * (1 - t * t);
    }
  }
  return 0.0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structural ops

inline Var constant(Tape& tape, Mat value) { return tape.constant(std::move(value)); }

inline Var zeros(Tape& tape, Index rows, Index cols) { return tape.constant(Mat::Zero(rows, cols)); }

/// Replicates a (1 x c) row to (rows x c) or a (r x 1) column to (r x cols) or
/// a 1x1 scalar to any shape.
inline Var broadcast(Var a, Index rows, Index cols) {
  const Index r = a.rows(), c = a.cols();
  if (r == rows && c == cols) return a;
  if (!((r == 1 || r == rows) && (c == 1 || c == cols)))
    throw DimensionError("broadcast: incompatible shapes");
  Mat v = a.value().replicate(rows / r, cols / c);
  const int ia = a.id();
  return a.tape().record(std::move(v), {a}, [ia, r, c](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (r == 1 && c == 1) {
      t.accumulate(ia, Mat::Constant(1, 1, g.sum()));
    } else if (r == 1) {
      t.accumulate(ia, g.colwise().sum());
    } else {
      t.accumulate(ia, g.rowwise().sum());
    }
  });
}

namespace detail {
inline std::pair<Var, Var> broadcast_pair(Var a, Var b) {
  const Index rows = std::max(a.rows(), b.rows());
  const Index cols = std::max(a.cols(), b.cols());
  return {broadcast(a, rows, cols), broadcast(b, rows, cols)};
}
}  // namespace detail

inline Var add(Var a, Var b) {
  auto [x, y] = detail::broadcast_pair(a, b);
  detail::same_shape(x, y, "add");
  const int ix = x.id(), iy = y.id();
  return x.tape().record(x.value() + y.value(), {x, y}, [ix, iy](Tape& t, int self) {
    t.accumulate(ix, t.grad(self));
    t.accumulate(iy, t.grad(self));
  });
}

inline Var sub(Var a, Var b) {
  auto [x, y] = detail::broadcast_pair(a, b);
  detail::same_shape(x, y, "sub");
  const int ix = x.id(), iy = y.id();
  return x.tape().record(x.value() - y.value(), {x, y}, [ix, iy](Tape& t, int self) {
    t.accumulate(ix, t.grad(self));
    t.accumulate(iy, -t.grad(self));
  });
}

inline Var hadamard(Var a, Var b) {
  auto [x, y] = detail::broadcast_pair(a, b);
  detail::same_shape(x, y, "hadamard");
  const int ix = x.id(), iy = y.id();
  return x.tape().record(x.value().cwiseProduct(y.value()), {x, y}, [ix, iy](Tape& t, int self) {
    const Mat& g = t.grad(self);
    t.accumulate(ix, g.cwiseProduct(t.value(iy)));
    t.accumulate(iy, g.cwiseProduct(t.value(ix)));
  });
}

inline Var divide(Var a, Var b) {
  auto [x, y] = detail::broadcast_pair(a, b);
  detail::same_shape(x, y, "divide");
  const int ix = x.id(), iy = y.id();
  return x.tape().record(x.value().cwiseQuotient(y.value()), {x, y}, [ix, iy](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& yv = t.value(iy);
    t.accumulate(ix, g.cwiseQuotient(yv));
    t.accumulate(iy, -(g.cwiseProduct(t.value(self))).cwiseQuotient(yv));
  });
}

inline Var scale(Var a, double c) {
  const int ia = a.id();
  return a.tape().record(c * a.value(), {a}, [ia, c](Tape& t, int self) { t.accumulate(ia, c * t.grad(self)); });
}

inline Var add_scalar(Var a, double c) {
  const int ia = a.id();
  return a.tape().record((a.value().array() + c).matrix(), {a},
                         [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self)); });
}

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  Mat v = a.value() * b.value();
  return a.tape().record(std::move(v), {a, b}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a^T b without materializing the transpose.
inline Var matmul_tn(Var a, Var b) {
  if (a.rows() != b.rows()) throw DimensionError("matmul_tn: dimension mismatch");
  const int ia = a.id(), ib = b.id();
  Mat v = a.value().transpose() * b.value();
  return a.tape().record(std::move(v), {a, b}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, t.value(ib) * g.transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia) * g);
  });
}

/// W x + b with b a column broadcast over the batch.
inline Var affine(Var w, Var x, Var b) {
  if (w.cols() != x.rows() || b.rows() != w.rows() || b.cols() != 1)
    throw DimensionError("affine: dimension mismatch");
  const int iw = w.id(), ix = x.id(), ib = b.id();
  Mat v = w.value() * x.value();
  v.colwise() += b.value().col(0);
  return w.tape().record(std::move(v), {w, x, b}, [iw, ix, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(iw)) t.accumulate(iw, g * t.value(ix).transpose());
    if (t.requires_grad(ix)) t.accumulate(ix, t.value(iw).transpose() * g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.rowwise().sum());
  });
}

inline Var transpose(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().transpose(), {a},
                         [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self).transpose()); });
}

inline Var rows(Var a, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > a.rows()) throw DimensionError("rows: range out of bounds");
  const int ia = a.id();
  return a.tape().record(a.value().middleRows(first, count), {a}, [ia, first](Tape& t, int self) {
    t.accumulate_rows(ia, first, t.grad(self));
  });
}

inline Var vcat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("vcat: no inputs");
  Tape& tape = parts.front().tape();
  const Index cols = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("vcat: column counts differ");
    total += p.rows();
  }
  Mat v(total, cols);
  std::vector<std::pair<int, Index>> layout;
  Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    layout.emplace_back(p.id(), r);
    r += p.rows();
  }
  return tape.record(std::move(v), parts, [layout](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (const auto& [id, start] : layout) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
    }
  });
}

inline Var vcat(std::initializer_list<Var> parts) { return vcat(std::span<const Var>(parts.begin(), parts.size())); }

inline Var sum(Var a) {
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record(Mat::Constant(1, 1, a.value().sum()), {a}, [ia, r, c](Tape& t, int self) {
    t.accumulate(ia, Mat::Constant(r, c, t.grad(self)(0, 0)));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Column sums: (r x B) -> (1 x B).
inline Var colsum(Var a) {
  const int ia = a.id();
  const Index r = a.rows();
  return a.tape().record(a.value().colwise().sum(), {a}, [ia, r](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).replicate(r, 1));
  });
}

/// Per-column dot products: (r x B), (r x B) -> (1 x B).
inline Var dot_cols(Var a, Var b) {
  detail::same_shape(a, b, "dot_cols");
  const int ia = a.id(), ib = b.id();
  const Index r = a.rows();
  Mat v = a.value().cwiseProduct(b.value()).colwise().sum();
  return a.tape().record(std::move(v), {a, b}, [ia, ib, r](Tape& t, int self) {
    const Mat g = t.grad(self).replicate(r, 1);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

namespace detail {
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  const int ia = a.id();
  Mat v = a.value().unaryExpr(f);
  return a.tape().record(std::move(v), {a}, [ia, df](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ia).unaryExpr(df)));
  });
}

/// Vectorized (f^(order), f^(order+1)) of the activation.
inline std::pair<Mat, Mat> activation_pair(Activation a, int order, const Eigen::ArrayXXd& x) {
  using Arr = Eigen::ArrayXXd;
  if (a == Activation::tanh) {
    const Arr t = x.tanh();
    const Arr d1 = 1 - t.square();
    if (order == 0) return {t.matrix(), d1.matrix()};
    return {d1.matrix(), (-2 * t * d1).matrix()};
  }
  const Arr s = (1 + (-x).exp()).inverse();
  const Arr ds = s * (1 - s);
  if (a == Activation::silu) {
    if (order == 0) return {(x * s).matrix(), (s + x * ds).matrix()};
    return {(s + x * ds).matrix(), (ds * (2 + x * (1 - 2 * s))).matrix()};
  }
  if (order == 0) return {(x.max(0.0) + (-x.abs()).exp().log1p()).matrix(), s.matrix()};
  return {s.matrix(), ds.matrix()};
}
}  // namespace detail

/// order 0 applies the activation, order 1 its derivative. The backward pass of
/// an order-1 node uses the second derivative, which is what makes gradients
/// of input-gradients (dK/dz inside a trained field) available.
inline Var activation(Var a, Activation kind, int order = 0) {
  if (order < 0 || order > 1) throw ContractError("activation: order must be 0 or 1");
  const int ia = a.id();
  Tape& tape = a.tape();
  auto [v, dv] = detail::activation_pair(kind, order, a.value().array());
  if (!tape.requires_grad(ia)) return tape.constant(std::move(v));
  // Keep the derivative from the forward pass; the backward is then one product.
  return tape.record(std::move(v), {a}, [ia, dv = std::move(dv)](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(dv));
  });
}

inline Var exp(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().array().exp().matrix(), {a}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var sin(Var a) {
  return detail::unary(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

inline Var cos(Var a) {
  return detail::unary(a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

inline Var tanh(Var a) { return activation(a, Activation::tanh, 0); }

inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double x) { return x > 0 ? 0.5 / std::sqrt(x) : 0.0; });
}

inline Var pow(Var a, double p) {
  return detail::unary(a, [p](double x) { return std::pow(x, p); },
                       [p](double x) { return p * std::pow(x, p - 1); });
}

inline Var square(Var a) { return hadamard(a, a); }

/// Subgradient 0 at the kink.
inline Var abs(Var a) {
  return detail::unary(a, [](double x) { return std::abs(x); },
                       [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

/// max(0, x); subgradient 0 at the kink.
inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

/// Euclidean norm of every column, (r x B) -> (1 x B); zero columns get a zero
/// subgradient.
inline Var norm_cols(Var a) {
  const int ia = a.id();
  Mat v = a.value().colwise().norm();
  return a.tape().record(std::move(v), {a}, [ia](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& x = t.value(ia);
    const Mat& n = t.value(self);
    Mat out = Mat::Zero(x.rows(), x.cols());
    for (Index b = 0; b < x.cols(); ++b)
      if (n(0, b) > 0) out.col(b) = (g(0, b) / n(0, b)) * x.col(b);
    t.accumulate(ia, out);
  });
}

// ---------------------------------------------------------------------------
// Batched per-sample matrix products. A batch of (r x c) matrices is stored as
// an (r*c x B) node with row-major flattening: M_b(i, j) = flat(i*c + j, b).

/// y_b = M_b v_b.
inline Var bmv(Var m, Var v, Index r, Index c) {
  if (m.rows() != r * c || v.rows() != c || m.cols() != v.cols()) throw DimensionError("bmv: dimension mismatch");
  const Index batch = v.cols();
  const Mat& mv = m.value();
  const Mat& vv = v.value();
  Mat y = Mat::Zero(r, batch);
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < r; ++i) {
      double acc = 0;
      for (Index j = 0; j < c; ++j) acc += mv(i * c + j, b) * vv(j, b);
      y(i, b) = acc;
    }
  const int im = m.id(), iv = v.id();
  return m.tape().record(std::move(y), {m, v}, [im, iv, r, c](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& mv = t.value(im);
    const Mat& vv = t.value(iv);
    const Index batch = g.cols();
    if (t.requires_grad(im)) {
      Mat gm(r * c, batch);
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c; ++j) gm(i * c + j, b) = g(i, b) * vv(j, b);
      t.accumulate(im, gm);
    }
    if (t.requires_grad(iv)) {
      Mat gv = Mat::Zero(c, batch);
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c; ++j) gv(j, b) += mv(i * c + j, b) * g(i, b);
      t.accumulate(iv, gv);
    }
  });
}

/// y_b = M_b^T v_b with M_b of shape (r x c) and v_b of length r.
inline Var bmtv(Var m, Var v, Index r, Index c) {
  if (m.rows() != r * c || v.rows() != r || m.cols() != v.cols()) throw DimensionError("bmtv: dimension mismatch");
  const Index batch = v.cols();
  const Mat& mv = m.value();
  const Mat& vv = v.value();
  Mat y = Mat::Zero(c, batch);
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) y(j, b) += mv(i * c + j, b) * vv(i, b);
  const int im = m.id(), iv = v.id();
  return m.tape().record(std::move(y), {m, v}, [im, iv, r, c](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& mv = t.value(im);
    const Mat& vv = t.value(iv);
    const Index batch = g.cols();
    if (t.requires_grad(im)) {
      Mat gm(r * c, batch);
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c; ++j) gm(i * c + j, b) = vv(i, b) * g(j, b);
      t.accumulate(im, gm);
    }
    if (t.requires_grad(iv)) {
      Mat gv = Mat::Zero(r, batch);
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < r; ++i) {
          double acc = 0;
          for (Index j = 0; j < c; ++j) acc += mv(i * c + j, b) * g(j, b);
          gv(i, b) = acc;
        }
      t.accumulate(iv, gv);
    }
  });
}

/// Skew-symmetric part of a batch of flattened (n x n) matrices. Each
/// off-diagonal pair is computed once and negated; the diagonal is zero.
inline Var skew_flat(Var f, Index n) {
  if (f.rows() != n * n) throw DimensionError("skew_flat: expected n*n rows");
  const Mat& fv = f.value();
  Mat a = Mat::Zero(n * n, fv.cols());
  for (Index b = 0; b < fv.cols(); ++b)
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j) {
        const double v = 0.5 * (fv(i * n + j, b) - fv(j * n + i, b));
        a(i * n + j, b) = v;
        a(j * n + i, b) = -v;
      }
  const int iff = f.id();
  return f.tape().record(std::move(a), {f}, [iff, n](Tape& t, int self) {
    // The map is its own adjoint.
    const Mat& g = t.grad(self);
    Mat gf = Mat::Zero(n * n, g.cols());
    for (Index b = 0; b < g.cols(); ++b)
      for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) {
          const double v = 0.5 * (g(i * n + j, b) - g(j * n + i, b));
          gf(i * n + j, b) = v;
          gf(j * n + i, b) = -v;
        }
    t.accumulate(iff, gf);
  });
}

// ---------------------------------------------------------------------------
// Operators. Var * Var is elementwise.

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return hadamard(a, b); }
inline Var operator/(Var a, Var b) { return divide(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator/(Var a, double c) { return scale(a, 1.0 / c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, Var a) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, Var a) { return add_scalar(scale(a, -1.0), c); }
inline Var operator/(double c, Var a) {
  return divide(a.tape().constant(Mat::Constant(a.rows(), a.cols(), c)), a);
}

// ---------------------------------------------------------------------------
// Derivative utilities

/// Jacobian of f at x; row i is the gradient of output i.
template <class F>
Mat jacobian(F&& f, const Eigen::VectorXd& x) {
  Tape tape;
  Var in = tape.variable(x);
  Var out = f(tape, in);
  if (out.cols() != 1) throw DimensionError("jacobian: function must return a column vector");
  Mat jac(out.rows(), x.size());
  for (Index i = 0; i < out.rows(); ++i) {
    Mat seed = Mat::Zero(out.rows(), 1);
    seed(i, 0) = 1.0;
    tape.backward(out, seed);
    jac.row(i) = in.grad().col(0).transpose();
  }
  return jac;
}

struct GradientCheck {
  Eigen::VectorXd analytic;
  Eigen::VectorXd numeric;
  double relative_error = 0.0;
  bool passed = false;
};

/// Compares reverse-mode against central differences for a scalar function.
/// The error is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12).
template <class F>
GradientCheck gradient_check(F&& f, const Eigen::VectorXd& x, double h = 1e-5, double tol = 1e-5) {
  GradientCheck report;
  {
    Tape tape;
    Var in = tape.variable(x);
    Var out = f(tape, in);
    if (out.rows() != 1 || out.cols() != 1) throw ContractError("gradient_check: function must be scalar");
    tape.backward(out);
    report.analytic = in.grad().col(0);
  }
  auto eval = [&](const Eigen::VectorXd& p) {
    Tape tape;
    Var in = tape.constant(p);
    return f(tape, in).value()(0, 0);
  };
  report.numeric.resize(x.size());
  Eigen::VectorXd p = x;
  for (Index i = 0; i < x.size(); ++i) {
    p(i) = x(i) + h;
    const double up = eval(p);
    p(i) = x(i) - h;
    const double down = eval(p);
    p(i) = x(i);
    report.numeric(i) = (up - down) / (2 * h);
  }
  const double denom = std::max({report.analytic.norm(), report.numeric.norm(), 1e-12});
  report.relative_error = (report.analytic - report.numeric).norm() / denom;
  report.passed = report.relative_error <= tol;
  return report;
}

}  // namespace invarc::ad
