#pragma once

// Reverse-mode differentiation over dense matrices. A Tape records every
// primitive in creation order, so reverse creation order is a valid
// topological order for the backward sweep.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/numerics/matrix.hpp"

namespace mkgc::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the Tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  double scalar() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient flowing into the node's output.
  using Pullback = std::function<void(const Matrix& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push_owned(std::move(value), false, {}); }
  Var parameter(Matrix value) { return push_owned(std::move(value), true, {}); }

  /// Borrowed leaves; the referenced matrix must outlive the tape.
  Var constant_ref(const Matrix& value) { return push_ref(value, false); }
  Var parameter_ref(const Matrix& value) { return push_ref(value, true); }

  /// Records an interior node. The pullback runs only if some input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Pullback pullback) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(pullback));
  }

  Var record(Matrix value, std::span<const Var> inputs, Pullback pullback) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owned(v, "record");
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push_owned(std::move(value), needs, needs ? std::move(pullback) : Pullback{});
  }

  const Matrix& value(Var v) const {
    check_owned(v, "value");
    const Node& n = nodes_[v.id()];
    return n.ref != nullptr ? *n.ref : n.owned;
  }

  bool requires_grad(Var v) const {
    check_owned(v, "requires_grad");
    return nodes_[v.id()].requires_grad;
  }

  /// Backpropagates from a 1x1 loss node. Each node is visited at most once.
  void backward(Var loss) {
    require(!nodes_.empty(), ErrorKind::kUsage, "backward: tape is empty (no forward recorded)");
    check_owned(loss, "backward");
    const Matrix& lv = value(loss);
    require(lv.rows() == 1 && lv.cols() == 1, ErrorKind::kUsage,
            "backward: loss must be a 1x1 scalar node");
    for (Node& n : nodes_) n.grad.reset();
    grad_buffer(loss)(0, 0) = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.grad || !n.pullback) continue;
      // The pullback may allocate other nodes' buffers; copy our own first.
      const Matrix g = *n.grad;
      n.pullback(g, *this);
    }
    backpropagated_ = true;
  }

  /// Gradient of the last backward() loss w.r.t. v; exactly zero when v did not contribute.
  Matrix grad(Var v) const {
    require(backpropagated_, ErrorKind::kUsage, "grad: backward() has not been run");
    check_owned(v, "grad");
    const Node& n = nodes_[v.id()];
    if (n.grad) return *n.grad;
    const Matrix& val = value(v);
    return Matrix(val.rows(), val.cols());
  }

  /// Zero-initialised gradient accumulator for v, allocated on first use.
  Matrix& grad_buffer(Var v) {
    Node& n = nodes_[v.id()];
    if (!n.grad) {
      const Matrix& val = n.ref != nullptr ? *n.ref : n.owned;
      n.grad.emplace(val.rows(), val.cols());
    }
    return *n.grad;
  }

  bool wants_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backpropagated() const noexcept { return backpropagated_; }

  void clear() {
    nodes_.clear();
    backpropagated_ = false;
  }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    bool requires_grad = false;
    Pullback pullback;
    std::optional<Matrix> grad;
  };

  Var push_owned(Matrix value, bool requires_grad, Pullback pullback) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    n.pullback = std::move(pullback);
    nodes_.push_back(std::move(n));
    backpropagated_ = false;
    return Var(this, nodes_.size() - 1);
  }

  Var push_ref(const Matrix& value, bool requires_grad) {
    Node n;
    n.ref = &value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    backpropagated_ = false;
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v, const char* op) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      fail(ErrorKind::kUsage, std::string(op) + ": variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  bool backpropagated_ = false;
};

inline const Matrix& Var::value() const {
  require(tape_ != nullptr, ErrorKind::kUsage, "Var: unbound variable");
  return tape_->value(*this);
}

inline double Var::scalar() const {
  const Matrix& m = value();
  require(m.size() == 1, ErrorKind::kInvalidArgument, "Var::scalar: node is not 1x1");
  return m(0, 0);
}

namespace detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    fail(ErrorKind::kUsage, std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

inline void axpy(Matrix& dst, const Matrix& src, double alpha = 1.0) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "matmul");
  Matrix out = mkgc::matmul(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape& t) {
    if (t.wants_grad(a)) {
      // dA += g * B^T
      Matrix& ga = t.grad_buffer(a);
      const Matrix& bv = b.value();
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < bv.rows(); ++k) ga(i, k) += gij * bv(k, j);
        }
    }
    if (t.wants_grad(b)) {
      // dB += A^T * g
      Matrix& gb = t.grad_buffer(b);
      const Matrix& av = a.value();
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t k = 0; k < av.cols(); ++k) {
          const double aik = av(i, k);
          if (aik == 0.0) continue;
          for (std::size_t j = 0; j < g.cols(); ++j) gb(k, j) += aik * g(i, j);
        }
    }
  });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "add");
  Matrix out = mkgc::add(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape& t) {
    if (t.wants_grad(a)) detail::axpy(t.grad_buffer(a), g);
    if (t.wants_grad(b)) detail::axpy(t.grad_buffer(b), g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  detail::axpy(out, b.value(), -1.0);
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape& t) {
    if (t.wants_grad(a)) detail::axpy(t.grad_buffer(a), g);
    if (t.wants_grad(b)) detail::axpy(t.grad_buffer(b), g, -1.0);
  });
}

inline Var scale(Var a, double s) {
  Tape& tape = *a.tape();
  return tape.record(mkgc::scale(a.value(), s), {a}, [a, s](const Matrix& g, Tape& t) {
    detail::axpy(t.grad_buffer(a), g, s);
  });
}

/// s * a where s is a 1x1 node.
inline Var mul_scalar(Var a, Var s) {
  Tape& tape = detail::same_tape(a, s, "mul_scalar");
  require(s.value().size() == 1, ErrorKind::kInvalidArgument, "mul_scalar: s must be 1x1");
  Matrix out = mkgc::scale(a.value(), s.scalar());
  return tape.record(std::move(out), {a, s}, [a, s](const Matrix& g, Tape& t) {
    if (t.wants_grad(a)) detail::axpy(t.grad_buffer(a), g, s.scalar());
    if (t.wants_grad(s)) {
      double acc = 0.0;
      auto gv = g.values();
      auto av = a.value().values();
      for (std::size_t i = 0; i < gv.size(); ++i) acc += gv[i] * av[i];
      t.grad_buffer(s)(0, 0) += acc;
    }
  });
}

inline Var hadamard(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "hadamard");
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape& t) {
    auto gv = g.values();
    if (t.wants_grad(a)) {
      auto ga = t.grad_buffer(a).values();
      auto bv2 = b.value().values();
      for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * bv2[i];
    }
    if (t.wants_grad(b)) {
      auto gb = t.grad_buffer(b).values();
      auto av = a.value().values();
      for (std::size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i] * av[i];
    }
  });
}

inline Var tanh(Var a) {
  Matrix out = a.value();
  for (double& x : out.values()) x = std::tanh(x);
  Matrix saved = out;
  return a.tape()->record(std::move(out), {a}, [a, saved](const Matrix& g, Tape& t) {
    auto ga = t.grad_buffer(a).values();
    auto gv = g.values();
    auto yv = saved.values();
    for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * (1.0 - yv[i] * yv[i]);
  });
}

/// Softmax over all entries (used on column vectors).
inline Var softmax(Var a) {
  Vector y = mkgc::softmax(a.value().as_vector());
  Matrix out(a.rows(), a.cols(), y.raw());
  Matrix saved = out;
  return a.tape()->record(std::move(out), {a}, [a, saved](const Matrix& g, Tape& t) {
    auto gv = g.values();
    auto yv = saved.values();
    double inner = 0.0;
    for (std::size_t i = 0; i < gv.size(); ++i) inner += gv[i] * yv[i];
    auto ga = t.grad_buffer(a).values();
    for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += yv[i] * (gv[i] - inner);
  });
}

inline Var log_softmax(Var a) {
  const auto av = a.value().values();
  require(!av.empty(), ErrorKind::kInvalidArgument, "log_softmax: empty input");
  double peak = av[0];
  for (double x : av) peak = std::max(peak, x);
  double total = 0.0;
  for (double x : av) total += std::exp(x - peak);
  const double lse = peak + std::log(total);
  Matrix out = a.value();
  for (double& x : out.values()) x -= lse;
  Matrix probs = out;
  for (double& x : probs.values()) x = std::exp(x);
  return a.tape()->record(std::move(out), {a}, [a, probs](const Matrix& g, Tape& t) {
    auto gv = g.values();
    double gsum = 0.0;
    for (double x : gv) gsum += x;
    auto ga = t.grad_buffer(a).values();
    auto pv = probs.values();
    for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] - pv[i] * gsum;
  });
}

inline Var sum(Var a) {
  double acc = 0.0;
  for (double x : a.value().values()) acc += x;
  return a.tape()->record(Matrix(1, 1, {acc}), {a}, [a](const Matrix& g, Tape& t) {
    const double gs = g(0, 0);
    for (double& x : t.grad_buffer(a).values()) x += gs;
  });
}

inline Var dot(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "dot");
  require_same_shape(a.value(), b.value(), "dot");
  const double d = mkgc::dot(a.value().values(), b.value().values());
  return tape.record(Matrix(1, 1, {d}), {a, b}, [a, b](const Matrix& g, Tape& t) {
    const double gs = g(0, 0);
    if (t.wants_grad(a)) detail::axpy(t.grad_buffer(a), b.value(), gs);
    if (t.wants_grad(b)) detail::axpy(t.grad_buffer(b), a.value(), gs);
  });
}

inline Var squared_norm(Var a) {
  const double d = mkgc::dot(a.value().values(), a.value().values());
  return a.tape()->record(Matrix(1, 1, {d}), {a}, [a](const Matrix& g, Tape& t) {
    detail::axpy(t.grad_buffer(a), a.value(), 2.0 * g(0, 0));
  });
}

/// Euclidean norm; the gradient at the origin is taken as zero.
inline Var l2_norm(Var a) {
  const double n = mkgc::l2_norm(a.value().values());
  return a.tape()->record(Matrix(1, 1, {n}), {a}, [a, n](const Matrix& g, Tape& t) {
    if (n == 0.0) return;
    detail::axpy(t.grad_buffer(a), a.value(), g(0, 0) / n);
  });
}

inline Var pick(Var a, std::size_t index) {
  const auto av = a.value().values();
  require(index < av.size(), ErrorKind::kInvalidArgument, "pick: index out of range");
  return a.tape()->record(Matrix(1, 1, {av[index]}), {a}, [a, index](const Matrix& g, Tape& t) {
    t.grad_buffer(a).values()[index] += g(0, 0);
  });
}

inline Var transpose(Var a) {
  return a.tape()->record(mkgc::transpose(a.value()), {a}, [a](const Matrix& g, Tape& t) {
    Matrix& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(j, i) += g(i, j);
  });
}

/// Elementwise mean of equally shaped nodes.
inline Var mean(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kInvalidArgument, "mean: no operands");
  Tape& tape = *parts[0].tape();
  Matrix out(parts[0].rows(), parts[0].cols());
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p, "mean");
    require_same_shape(out, p.value(), "mean");
    detail::axpy(out, p.value());
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (double& x : out.values()) x *= inv;
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts, [inputs, inv](const Matrix& g, Tape& t) {
    for (const Var& p : inputs)
      if (t.wants_grad(p)) detail::axpy(t.grad_buffer(p), g, inv);
  });
}

/// Stacks column vectors (or same-width blocks) vertically.
inline Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kInvalidArgument, "concat_rows: no operands");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, ErrorKind::kInvalidArgument, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Matrix& v = p.value();
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < cols; ++j) out(offset + i, j) = v(i, j);
    offset += v.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape()->record(std::move(out), parts, [inputs](const Matrix& g, Tape& t) {
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t r = p.rows();
      if (t.wants_grad(p)) {
        Matrix& gp = t.grad_buffer(p);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gp(i, j) += g(off + i, j);
      }
      off += r;
    }
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return matmul(a, b); }

}  // namespace mkgc::ad
