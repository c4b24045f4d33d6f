#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation as it is evaluated (dynamic graph). Var is a
// lightweight handle (tape pointer + node index). Values are Eigen matrices of
// rank <= 2; scalars are 1x1. Binary elementwise ops broadcast a 1x1, 1xC or
// Rx1 operand against an RxC one.
//
// A tape is single-threaded. Independent tapes may be used concurrently.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pacm/errors.hpp"

namespace pacm::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// NaN propagates through a sum, so a non-NaN sum rules NaN out cheaply; a
// NaN sum can also come from inf - inf, hence the exact recheck.
inline bool has_nan(const Matrix& m) { return std::isnan(m.sum()) && m.hasNaN(); }

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows in
    const char* op = "";
    std::vector<std::size_t> parents;
    Backward backward;  // null for leaves and stop_gradient
    bool needs_grad = false;
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf.
  Var variable(Matrix v) { return leaf(std::move(v), true, "variable"); }
  Var variable(double v) { return variable(Matrix::Constant(1, 1, v)); }
  // Non-differentiable leaf (data, frozen noise).
  Var constant(Matrix v) { return leaf(std::move(v), false, "constant"); }
  Var constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }

  // Record a computed node. Throws NumericalError if the value holds NaN.
  Var push(Matrix value, const char* op, std::vector<std::size_t> parents, Backward bw) {
    bool ng = false;
    for (std::size_t p : parents) ng = ng || nodes_[p].needs_grad;
    if (has_nan(value)) throw NumericalError(trace("NaN produced by op '" + std::string(op) + "'", parents));
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.parents = std::move(parents);
    n.needs_grad = ng;
    if (ng) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  // Add g into the gradient slot of node id.
  void accumulate(std::size_t id, Matrix g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = std::move(g);
    else
      n.grad += g;
  }
  template <class Expr>
  void accumulate_expr(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }

  // Reverse sweep from a scalar output; returns d output / d input for each
  // requested input (zeros for unreachable inputs).
  std::vector<Matrix> grad(const Var& output, std::span<const Var> inputs) {
    if (output.tape() != this) throw UsageError("grad: output belongs to another tape");
    const Node& out = nodes_[output.id()];
    if (out.value.rows() != 1 || out.value.cols() != 1) throw UsageError("grad: output must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[output.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t k = output.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.grad.size() == 0 || !n.backward) continue;
      if (has_nan(n.grad)) throw NumericalError(trace("NaN gradient at op '" + std::string(n.op) + "'", n.parents));
      n.backward(*this, k);
    }
    std::vector<Matrix> result;
    result.reserve(inputs.size());
    for (const Var& v : inputs) {
      const Node& n = nodes_[v.id()];
      result.push_back(n.grad.size() ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols()));
    }
    return result;
  }
  std::vector<Matrix> grad(const Var& output, std::initializer_list<Var> inputs) {
    std::vector<Var> v(inputs);
    return grad(output, std::span<const Var>(v));
  }

 private:
  Var leaf(Matrix v, bool needs_grad, const char* op) {
    if (v.hasNaN()) throw NumericalError(std::string("NaN in ") + op + " leaf");
    Node n;
    n.value = std::move(v);
    n.op = op;
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::string trace(const std::string& head, const std::vector<std::size_t>& parents) const {
    std::ostringstream os;
    os << head << "; inputs:";
    for (std::size_t p : parents) os << " #" << p << ":" << nodes_[p].op;
    os << "; recent ops:";
    const std::size_t start = nodes_.size() > 8 ? nodes_.size() - 8 : 0;
    for (std::size_t k = start; k < nodes_.size(); ++k) os << " #" << k << ":" << nodes_[k].op;
    return os.str();
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->node(id_).value; }
inline double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw UsageError("Var::scalar: value is not 1x1");
  return v(0, 0);
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw UsageError("autodiff: operands on different tapes");
  return *a.tape();
}

// Resulting shape of a broadcast binary op.
inline std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Matrix& a, const Matrix& b) {
  auto dim = [](Eigen::Index x, Eigen::Index y) -> Eigen::Index {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw UsageError("autodiff: incompatible shapes for broadcasting");
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

inline Matrix expand(const Matrix& a, Eigen::Index r, Eigen::Index c) {
  if (a.rows() == r && a.cols() == c) return a;
  if (a.size() == 1) return Matrix::Constant(r, c, a(0, 0));
  if (a.rows() == 1) return a.replicate(r, 1);
  return a.replicate(1, c);
}

// Operand viewed at the broadcast shape; copies only when it must expand.
class Expanded {
 public:
  Expanded(const Matrix& a, Eigen::Index r, Eigen::Index c) : ptr_(&a) {
    if (a.rows() != r || a.cols() != c) {
      storage_ = expand(a, r, c);
      ptr_ = &storage_;
    }
  }
  Expanded(const Expanded&) = delete;
  Expanded& operator=(const Expanded&) = delete;
  const Matrix& get() const { return *ptr_; }
  auto array() const { return ptr_->array(); }

 private:
  Matrix storage_;
  const Matrix* ptr_;
};

// Sum g down to shape (r, c) along broadcast axes.
inline Matrix reduce_to(Matrix g, Eigen::Index r, Eigen::Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == 1) return Matrix::Constant(1, 1, g.sum());
  if (r == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

template <class F>
Var unary(const Var& x, const char* op, Matrix value, F dfdx) {
  Tape& t = *x.tape();
  const std::size_t xi = x.id();
  return t.push(std::move(value), op, {xi}, [xi, dfdx](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    Matrix d = dfdx(tp.node(xi).value, tp.node(self).value);
    tp.accumulate_expr(xi, (g.array() * d.array()).matrix());
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary

inline Var operator+(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix v = (detail::Expanded(a.value(), r, c).array() + detail::Expanded(b.value(), r, c).array()).matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push(std::move(v), "add", {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.node(ai).needs_grad) tp.accumulate(ai, detail::reduce_to(g, tp.node(ai).value.rows(), tp.node(ai).value.cols()));
    if (tp.node(bi).needs_grad) tp.accumulate(bi, detail::reduce_to(g, tp.node(bi).value.rows(), tp.node(bi).value.cols()));
  });
}

inline Var operator-(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix v = (detail::Expanded(a.value(), r, c).array() - detail::Expanded(b.value(), r, c).array()).matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push(std::move(v), "sub", {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.node(ai).needs_grad) tp.accumulate(ai, detail::reduce_to(g, tp.node(ai).value.rows(), tp.node(ai).value.cols()));
    if (tp.node(bi).needs_grad) tp.accumulate(bi, -detail::reduce_to(g, tp.node(bi).value.rows(), tp.node(bi).value.cols()));
  });
}

inline Var operator*(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix v = (detail::Expanded(a.value(), r, c).array() * detail::Expanded(b.value(), r, c).array()).matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push(std::move(v), "mul", {ai, bi}, [ai, bi, r, c](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& av = tp.node(ai).value;
    const Matrix& bv = tp.node(bi).value;
    if (tp.node(ai).needs_grad)
      tp.accumulate(ai, detail::reduce_to((g.array() * detail::Expanded(bv, r, c).array()).matrix(), av.rows(), av.cols()));
    if (tp.node(bi).needs_grad)
      tp.accumulate(bi, detail::reduce_to((g.array() * detail::Expanded(av, r, c).array()).matrix(), bv.rows(), bv.cols()));
  });
}

inline Var operator/(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix v = (detail::Expanded(a.value(), r, c).array() / detail::Expanded(b.value(), r, c).array()).matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push(std::move(v), "div", {ai, bi}, [ai, bi, r, c](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& av = tp.node(ai).value;
    const Matrix& bv = tp.node(bi).value;
    const detail::Expanded be(bv, r, c);
    if (tp.node(ai).needs_grad)
      tp.accumulate(ai, detail::reduce_to((g.array() / be.array()).matrix(), av.rows(), av.cols()));
    if (tp.node(bi).needs_grad) {
      const Matrix& y = tp.node(self).value;
      tp.accumulate(bi, detail::reduce_to((-g.array() * y.array() / be.array()).matrix(), bv.rows(), bv.cols()));
    }
  });
}

inline Var operator/(double s, const Var& a) { return a.tape()->constant(s) / a; }

inline Var operator-(const Var& x) {
  return detail::unary(x, "neg", -x.value(), [](const Matrix& xv, const Matrix&) {
    return Matrix::Constant(xv.rows(), xv.cols(), -1.0);
  });
}

// scalar constants
inline Var operator+(const Var& a, double s) {
  Tape& t = *a.tape();
  const std::size_t ai = a.id();
  return t.push((a.value().array() + s).matrix(), "add_scalar", {ai},
                [ai](Tape& tp, std::size_t self) { tp.accumulate(ai, tp.grad_of(self)); });
}
inline Var operator+(double s, const Var& a) { return a + s; }
inline Var operator-(const Var& a, double s) { return a + (-s); }
inline Var operator-(double s, const Var& a) { return (-a) + s; }
inline Var operator*(const Var& a, double s) {
  Tape& t = *a.tape();
  const std::size_t ai = a.id();
  return t.push(a.value() * s, "mul_scalar", {ai},
                [ai, s](Tape& tp, std::size_t self) { tp.accumulate(ai, tp.grad_of(self) * s); });
}
inline Var operator*(double s, const Var& a) { return a * s; }
inline Var operator/(const Var& a, double s) {
  Tape& t = *a.tape();
  const std::size_t ai = a.id();
  return t.push(a.value() / s, "div_scalar", {ai},
                [ai, s](Tape& tp, std::size_t self) { tp.accumulate(ai, tp.grad_of(self) / s); });
}

// ---------------------------------------------------------------------------
// elementwise unary

inline Var exp(const Var& x) {
  return detail::unary(x, "exp", x.value().array().exp().matrix(),
                       [](const Matrix&, const Matrix& y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary(x, "log", x.value().array().log().matrix(),
                       [](const Matrix& xv, const Matrix&) { return xv.array().inverse().matrix(); });
}

// tanh(x) = 1 - 2 / (exp(2x) + 1), which vectorizes; absolute error ~1e-16.
inline Var tanh(const Var& x) {
  Matrix v = (1.0 - 2.0 / ((2.0 * x.value().array()).exp() + 1.0)).matrix();
  return detail::unary(x, "tanh", std::move(v),
                       [](const Matrix&, const Matrix& y) { return (1.0 - y.array().square()).matrix(); });
}

inline Var square(const Var& x) {
  return detail::unary(x, "square", x.value().array().square().matrix(),
                       [](const Matrix& xv, const Matrix&) { return (2.0 * xv.array()).matrix(); });
}

inline Var pow(const Var& x, double p) {
  return detail::unary(x, "pow", x.value().array().pow(p).matrix(), [p](const Matrix& xv, const Matrix&) {
    return (p * xv.array().pow(p - 1.0)).matrix();
  });
}

// ELU with alpha = 1, written as max(x, 0) + exp(min(x, 0)) - 1 so it
// vectorizes. The derivative is min(y + 1, 1).
inline Var elu(const Var& x) {
  const auto xa = x.value().array();
  Matrix v = (xa.max(0.0) + xa.min(0.0).exp() - 1.0).matrix();
  return detail::unary(x, "elu", std::move(v), [](const Matrix&, const Matrix& y) {
    return (y.array() + 1.0).min(1.0).matrix().eval();
  });
}

inline constexpr double kLeakyReluSlope = 0.2;

inline Var leaky_relu(const Var& x) {
  Matrix v = x.value().unaryExpr([](double a) { return a > 0.0 ? a : kLeakyReluSlope * a; });
  return detail::unary(x, "leaky_relu", std::move(v), [](const Matrix& xv, const Matrix&) {
    return xv.unaryExpr([](double a) { return a > 0.0 ? 1.0 : kLeakyReluSlope; }).eval();
  });
}

// Value passes through; the gradient is exactly zero.
inline Var stop_gradient(const Var& x) {
  return x.tape()->push(x.value(), "stop_gradient", {x.id()}, nullptr);
}

// ---------------------------------------------------------------------------
// linear algebra and shape

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dimensions differ");
  Matrix v = a.value() * b.value();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push(std::move(v), "matmul", {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.node(ai).needs_grad) tp.accumulate_expr(ai, g * tp.node(bi).value.transpose());
    if (tp.node(bi).needs_grad) tp.accumulate_expr(bi, tp.node(ai).value.transpose() * g);
  });
}

inline Var transpose(const Var& x) {
  const std::size_t xi = x.id();
  return x.tape()->push(x.value().transpose(), "transpose", {xi}, [xi](Tape& tp, std::size_t self) {
    tp.accumulate_expr(xi, tp.grad_of(self).transpose());
  });
}

// Sub-matrix [r0, r0 + nr) x [c0, c0 + nc).
inline Var block(const Var& x, Eigen::Index r0, Eigen::Index c0, Eigen::Index nr, Eigen::Index nc) {
  if (r0 < 0 || c0 < 0 || r0 + nr > x.rows() || c0 + nc > x.cols()) throw UsageError("block: out of range");
  const std::size_t xi = x.id();
  return x.tape()->push(x.value().block(r0, c0, nr, nc), "block", {xi},
                        [xi, r0, c0, nr, nc](Tape& tp, std::size_t self) {
                          Tape::Node& n = tp.node(xi);
                          if (!n.needs_grad) return;
                          if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
                          n.grad.block(r0, c0, nr, nc) += tp.grad_of(self);
                        });
}

inline Var element(const Var& x, Eigen::Index r, Eigen::Index c) { return block(x, r, c, 1, 1); }
inline Var row(const Var& x, Eigen::Index r) { return block(x, r, 0, 1, x.cols()); }
inline Var col(const Var& x, Eigen::Index c) { return block(x, 0, c, x.rows(), 1); }

// Row-major reinterpretation of a contiguous run of entries: entries
// [offset, offset + rows*cols) of x read in row-major order become a
// rows x cols matrix, also filled row-major.
inline Var reshape(const Var& x, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& xv = x.value();
  const Eigen::Index xc = xv.cols();
  if (offset < 0 || offset + rows * cols > xv.size()) throw UsageError("reshape: out of range");
  Matrix v(rows, cols);
  for (Eigen::Index k = 0; k < rows * cols; ++k) {
    const Eigen::Index s = offset + k;
    v(k / cols, k % cols) = xv(s / xc, s % xc);
  }
  const std::size_t xi = x.id();
  return x.tape()->push(std::move(v), "reshape", {xi}, [xi, offset, rows, cols](Tape& tp, std::size_t self) {
    Tape::Node& n = tp.node(xi);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    const Matrix& g = tp.grad_of(self);
    const Eigen::Index xc2 = n.value.cols();
    for (Eigen::Index k = 0; k < rows * cols; ++k) {
      const Eigen::Index s = offset + k;
      n.grad(s / xc2, s % xc2) += g(k / cols, k % cols);
    }
  });
}
inline Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.value().size()) throw UsageError("reshape: size mismatch");
  return reshape(x, 0, rows, cols);
}

// Stack along rows (axis 0) or columns (axis 1).
inline Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  Tape& t = *parts.front().tape();
  Eigen::Index r = 0, c = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw UsageError("concat: operands on different tapes");
    if (axis == 0) {
      if (r > 0 && p.cols() != c) throw UsageError("concat: column counts differ");
      r += p.rows();
      c = p.cols();
    } else {
      if (c > 0 && p.rows() != r) throw UsageError("concat: row counts differ");
      c += p.cols();
      r = p.rows();
    }
  }
  Matrix v(r, c);
  std::vector<std::size_t> ids;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    ids.push_back(p.id());
    if (axis == 0) {
      v.middleRows(off, p.rows()) = p.value();
      off += p.rows();
    } else {
      v.middleCols(off, p.cols()) = p.value();
      off += p.cols();
    }
  }
  auto parents = ids;
  return t.push(std::move(v), axis == 0 ? "concat_rows" : "concat_cols", std::move(parents),
                [ids, axis](Tape& tp, std::size_t self) {
                  const Matrix& g = tp.grad_of(self);
                  Eigen::Index o = 0;
                  for (std::size_t id : ids) {
                    const Matrix& pv = tp.node(id).value;
                    if (axis == 0) {
                      if (tp.node(id).needs_grad) tp.accumulate_expr(id, g.middleRows(o, pv.rows()));
                      o += pv.rows();
                    } else {
                      if (tp.node(id).needs_grad) tp.accumulate_expr(id, g.middleCols(o, pv.cols()));
                      o += pv.cols();
                    }
                  }
                });
}
inline Var concat(std::initializer_list<Var> parts, int axis) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v), axis);
}

// ---------------------------------------------------------------------------
// reductions. axis 0 reduces over rows (result 1 x C), axis 1 over columns
// (result R x 1).

inline Var sum(const Var& x) {
  const std::size_t xi = x.id();
  return x.tape()->push(Matrix::Constant(1, 1, x.value().sum()), "sum", {xi}, [xi](Tape& tp, std::size_t self) {
    const Matrix& xv = tp.node(xi).value;
    tp.accumulate_expr(xi, Matrix::Constant(xv.rows(), xv.cols(), tp.grad_of(self)(0, 0)));
  });
}

inline Var mean(const Var& x) { return sum(x) / static_cast<double>(x.value().size()); }

inline Var sum(const Var& x, int axis) {
  const std::size_t xi = x.id();
  Matrix v = axis == 0 ? Matrix(x.value().colwise().sum()) : Matrix(x.value().rowwise().sum());
  return x.tape()->push(std::move(v), "sum_axis", {xi}, [xi](Tape& tp, std::size_t self) {
    const Matrix& xv = tp.node(xi).value;
    tp.accumulate(xi, detail::expand(tp.grad_of(self), xv.rows(), xv.cols()));
  });
}

inline Var mean(const Var& x, int axis) {
  const double k = static_cast<double>(axis == 0 ? x.rows() : x.cols());
  return sum(x, axis) / k;
}

namespace detail {
// Index of the maximum along the reduced axis; ties go to the lowest index.
inline std::vector<Eigen::Index> argmax(const Matrix& x, int axis) {
  const Eigen::Index outer = axis == 0 ? x.cols() : x.rows();
  const Eigen::Index inner = axis == 0 ? x.rows() : x.cols();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(outer), 0);
  for (Eigen::Index o = 0; o < outer; ++o) {
    Eigen::Index best = 0;
    double bv = axis == 0 ? x(0, o) : x(o, 0);
    for (Eigen::Index k = 1; k < inner; ++k) {
      const double v = axis == 0 ? x(k, o) : x(o, k);
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    idx[static_cast<std::size_t>(o)] = best;
  }
  return idx;
}
}  // namespace detail

// Max along an axis; the subgradient flows to the lowest maximizing index.
inline Var max(const Var& x, int axis) {
  const Matrix& xv = x.value();
  const auto idx = detail::argmax(xv, axis);
  Matrix v = axis == 0 ? Matrix(1, xv.cols()) : Matrix(xv.rows(), 1);
  for (std::size_t o = 0; o < idx.size(); ++o) {
    const auto oi = static_cast<Eigen::Index>(o);
    v(axis == 0 ? 0 : oi, axis == 0 ? oi : 0) = axis == 0 ? xv(idx[o], oi) : xv(oi, idx[o]);
  }
  const std::size_t xi = x.id();
  return x.tape()->push(std::move(v), "max", {xi}, [xi, idx, axis](Tape& tp, std::size_t self) {
    Tape::Node& n = tp.node(xi);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    const Matrix& g = tp.grad_of(self);
    for (std::size_t o = 0; o < idx.size(); ++o) {
      const auto oi = static_cast<Eigen::Index>(o);
      if (axis == 0)
        n.grad(idx[o], oi) += g(0, oi);
      else
        n.grad(oi, idx[o]) += g(oi, 0);
    }
  });
}

inline Var max(const Var& x) { return max(max(x, 0), 1); }

// Stable log(sum(exp(x))) along an axis. The gradient is the softmax of x
// along that axis.
inline Var log_sum_exp(const Var& x, int axis) {
  const Matrix& xv = x.value();
  const Eigen::Index outer = axis == 0 ? xv.cols() : xv.rows();
  const Eigen::Index inner = axis == 0 ? xv.rows() : xv.cols();
  Matrix v = axis == 0 ? Matrix(1, outer) : Matrix(outer, 1);
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index o = 0; o < outer; ++o) {
    double mx = ninf;
    for (Eigen::Index k = 0; k < inner; ++k) mx = std::max(mx, axis == 0 ? xv(k, o) : xv(o, k));
    double r;
    if (mx == ninf) {
      r = ninf;
    } else {
      double s = 0.0;
      for (Eigen::Index k = 0; k < inner; ++k) s += std::exp((axis == 0 ? xv(k, o) : xv(o, k)) - mx);
      r = mx + std::log(s);
    }
    (axis == 0 ? v(0, o) : v(o, 0)) = r;
  }
  const std::size_t xi = x.id();
  return x.tape()->push(std::move(v), "log_sum_exp", {xi}, [xi, axis](Tape& tp, std::size_t self) {
    const Matrix& xv2 = tp.node(xi).value;
    const Matrix& y = tp.node(self).value;
    const Matrix& g = tp.grad_of(self);
    Matrix d(xv2.rows(), xv2.cols());
    for (Eigen::Index r = 0; r < xv2.rows(); ++r)
      for (Eigen::Index c = 0; c < xv2.cols(); ++c) {
        const Eigen::Index o = axis == 0 ? c : r;
        const double yo = axis == 0 ? y(0, o) : y(o, 0);
        const double go = axis == 0 ? g(0, o) : g(o, 0);
        d(r, c) = yo == ninf ? 0.0 : go * std::exp(xv2(r, c) - yo);
      }
    tp.accumulate(xi, d);
  });
}

inline Var log_mean_exp(const Var& x, int axis) {
  const double k = static_cast<double>(axis == 0 ? x.rows() : x.cols());
  return log_sum_exp(x, axis) - std::log(k);
}

// ---------------------------------------------------------------------------
// gradient checking

using ScalarFn = std::function<Var(Tape&, const Var&)>;

struct ValueAndGrad {
  double value = 0.0;
  Eigen::VectorXd grad;
};

// Evaluate f at x (a column vector leaf) and its reverse-mode gradient.
inline ValueAndGrad value_and_grad(const ScalarFn& f, const Eigen::VectorXd& x) {
  Tape tape;
  Var xv = tape.variable(Matrix(x));
  Var y = f(tape, xv);
  auto g = tape.grad(y, {xv});
  return {y.scalar(), Eigen::Map<const Eigen::VectorXd>(g[0].data(), g[0].size())};
}

inline double evaluate(const ScalarFn& f, const Eigen::VectorXd& x) {
  Tape tape;
  return f(tape, tape.variable(Matrix(x))).scalar();
}

// Max over coordinates of |a - b| / max(1e-8, |a| + |b|) between central
// differences and reverse mode.
inline double finite_diff_check(const ScalarFn& f, const Eigen::VectorXd& x, double eps) {
  if (!(eps > 0.0)) throw UsageError("finite_diff_check: eps must be > 0");
  const ValueAndGrad vg = value_and_grad(f, x);
  double worst = 0.0;
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + eps;
    const double fp = evaluate(f, xp);
    xp[i] = x[i] - eps;
    const double fm = evaluate(f, xp);
    xp[i] = x[i];
    const double fd = (fp - fm) / (2.0 * eps);
    const double a = vg.grad[i];
    worst = std::max(worst, std::abs(a - fd) / std::max(1e-8, std::abs(a) + std::abs(fd)));
  }
  return worst;
}

}  // namespace pacm::ad
