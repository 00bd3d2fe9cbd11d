#pragma once

// Reverse-mode automatic differentiation on a linear tape.
//
// Tensors are dense n-dimensional arrays of float (training) or double
// (verification). Ops compute eagerly; when a Tape is active and an input
// requires gradients, a backward rule is recorded. Tape::backward walks the
// records once in reverse, accumulating gradients additively across fan-out.
//
// Recording is serialized (one tape per training step). Value-only forward
// evaluation with no active tape is safe to run from parallel regions.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf::ad {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until first write
  bool requires_grad = false;
  uint64_t id = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), S(0));
  }
  void drop_grad() {
    std::vector<S>().swap(grad);
  }
};

template <typename S>
class Tape;

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != values.size())
      throw ContractViolation("Tensor::from: shape " + shape_str(shape) +
                              " does not match " + std::to_string(values.size()) + " values");
    Tensor t;
    t.n_ = std::make_shared<Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    t.n_->id = next_id();
    return t;
  }

  static Tensor zeros(Shape shape) {
    return full(std::move(shape), S(0));
  }

  static Tensor full(Shape shape, S v) {
    std::vector<S> data(shape_numel(shape), v);
    return from(std::move(shape), std::move(data));
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  static Tensor param(Shape shape, std::vector<S> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.n_->requires_grad = true;
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  size_t numel() const { return n_->values.size(); }
  uint64_t id() const { return n_->id; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  std::span<const S> values() const { return n_->values; }
  std::span<S> values_mut() { return n_->values; }
  S value_at(size_t i) const { return n_->values[i]; }
  S scalar_value() const {
    if (numel() != 1) throw ContractViolation("scalar_value: tensor has " + std::to_string(numel()) + " elements");
    return n_->values[0];
  }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const S> grad() const {
    if (n_->grad.empty()) throw ContractViolation("grad: no gradient stored for node " + std::to_string(n_->id));
    return n_->grad;
  }
  void zero_grad() { n_->drop_grad(); }

  // Fresh constant leaf holding a copy of the values; cuts the graph.
  Tensor detach() const {
    return from(n_->shape, n_->values);
  }

  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
  }
  std::shared_ptr<Node<S>> n_;
};

template <typename S>
class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<uint64_t> input_ids;
    uint64_t output_id;
    std::vector<std::shared_ptr<Node<S>>> nodes;  // inputs then output; keeps them alive
    std::function<void()> backward;
  };

  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }
  static void set_current(Tape* t) { current_ = t; }

  void push(Record r) { records_.push_back(std::move(r)); }
  size_t size() const { return records_.size(); }

  // d(root)/d(leaf) into every requires_grad leaf reachable from root.
  void backward(const Tensor<S>& root) {
    if (root.numel() != 1) throw ContractViolation("backward: root must be scalar, got " + shape_str(root.shape()));
    if (records_.empty()) throw ContractViolation("backward: tape is empty");
    root.node()->ensure_grad();
    root.node()->grad[0] += S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
  }

  // Deallocate gradient buffers on every node the tape touched. Used between
  // the discriminator and generator updates of one step so the second
  // backward starts from a clean slate without replaying the first subgraph.
  void clear_grads() {
    for (auto& r : records_)
      for (auto& n : r.nodes) n->drop_grad();
  }

 private:
  static thread_local Tape* current_;
  Tape* prev_ = nullptr;
  std::vector<Record> records_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

// Suppresses recording on this thread for its lifetime. Lets value-only code
// (e.g. full-image rendering) run while a training tape exists elsewhere in
// the call stack.
template <typename S>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(Tape<S>::current()) { Tape<S>::set_current(nullptr); }
  ~NoGradGuard() { Tape<S>::set_current(saved_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<S>* saved_;
};

namespace detail {

template <typename S>
void ensure_finite(const Tensor<S>& t, const char* op) {
  for (S v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
}

// Record a backward rule when a tape is active and any input needs gradients.
template <typename S, typename F>
void record(const char* op, std::initializer_list<Tensor<S>> inputs, Tensor<S>& out, F&& backward) {
  Tape<S>* tape = Tape<S>::current();
  if (!tape) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  typename Tape<S>::Record r;
  r.op = op;
  for (const auto& t : inputs) {
    r.input_ids.push_back(t.id());
    r.nodes.push_back(t.node());
  }
  r.output_id = out.id();
  r.nodes.push_back(out.node());
  r.backward = std::forward<F>(backward);
  tape->push(std::move(r));
}

enum class Broadcast { same, a_scalar, b_scalar, b_trailing, a_trailing };

// Elementwise binary ops accept equal shapes, a scalar on either side, or one
// operand whose shape equals the trailing dims of the other (broadcast over
// leading dims).
template <typename S>
Broadcast broadcast_kind(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  // b is checked first so that when both sides have one element the output
  // keeps a's shape (the data operand in patterns like add(matmul(x,w), b)).
  if (b.numel() == 1) return Broadcast::b_scalar;
  if (a.numel() == 1) return Broadcast::a_scalar;
  auto trailing = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i)
      if (big[big.size() - small.size() + i] != small[i]) return false;
    return true;
  };
  if (trailing(a.shape(), b.shape())) return Broadcast::b_trailing;
  if (trailing(b.shape(), a.shape())) return Broadcast::a_trailing;
  throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

template <typename S, typename FwdFn, typename DaFn, typename DbFn>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b,
                    FwdFn fwd, DaFn da_of, DbFn db_of) {
  using detail::Broadcast;
  const Broadcast k = detail::broadcast_kind(a, b, name);
  const bool b_small = (k == Broadcast::b_scalar || k == Broadcast::b_trailing);
  const bool a_small = (k == Broadcast::a_scalar || k == Broadcast::a_trailing);
  const Tensor<S>& big = a_small ? b : a;
  const size_t n = big.numel();
  const size_t period = a_small ? a.numel() : (b_small ? b.numel() : n);

  Tensor<S> out = Tensor<S>::zeros(big.shape());
  {
    auto ov = out.values_mut();
    auto av = a.values();
    auto bv = b.values();
    if (k == Broadcast::same) {
      for (size_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
    } else if (a_small) {
      for (size_t i = 0; i < n; ++i) ov[i] = fwd(av[i % period], bv[i]);
    } else {
      for (size_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i % period]);
    }
  }
  detail::ensure_finite(out, name);

  detail::record(name, {a, b}, out, [an = a.node(), bn = b.node(), on = out.node(),
                                     da_of, db_of, a_small, b_small, period] {
    if (on->grad.empty()) return;
    const size_t n = on->values.size();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const size_t ia = a_small ? i % period : i;
        const size_t ib = b_small ? i % period : i;
        an->grad[ia] += on->grad[i] * da_of(an->values[ia], bn->values[ib]);
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const size_t ia = a_small ? i % period : i;
        const size_t ib = b_small ? i % period : i;
        bn->grad[ib] += on->grad[i] * db_of(an->values[ia], bn->values[ib]);
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return mul(a, Tensor<S>::scalar(c));
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <typename S, typename FwdFn, typename GradFn>
Tensor<S> unary_op(const char* name, const Tensor<S>& x, FwdFn fwd, GradFn dydx_from_xy) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  }
  detail::ensure_finite(out, name);
  detail::record(name, {x}, out, [xn = x.node(), on = out.node(), dydx_from_xy] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->values.size(); ++i)
      xn->grad[i] += on->grad[i] * dydx_from_xy(xn->values[i], on->values[i]);
  });
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_op<S>(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary_op<S>(
      "sigmoid", x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> tanh_op(const Tensor<S>& x) {
  return unary_op<S>(
      "tanh", x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> exp_op(const Tensor<S>& x) {
  return unary_op<S>(
      "exp", x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log_op(const Tensor<S>& x) {
  return unary_op<S>(
      "log", x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
Tensor<S> sin_op(const Tensor<S>& x) {
  return unary_op<S>(
      "sin", x, [](S v) { return std::sin(v); }, [](S v, S) { return std::cos(v); });
}

template <typename S>
Tensor<S> cos_op(const Tensor<S>& x) {
  return unary_op<S>(
      "cos", x, [](S v) { return std::cos(v); }, [](S v, S) { return -std::sin(v); });
}

// Numerically stable: softplus(x) = max(x,0) + log1p(exp(-|x|)).
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return unary_op<S>(
      "softplus", x,
      [](S v) { return std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](S v, S) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      });
}

// ---------------------------------------------------------------------------
// Matrix multiply [M,K] x [K,N] -> [M,N]

namespace detail {

// C = A * B, row-major. ikj order so the inner loop runs down contiguous rows.
template <typename S>
void mm_nn(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m >= 64)
  for (int i = 0; i < m; ++i) {
    S* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate)
      for (int j = 0; j < n; ++j) crow[j] = S(0);
    const S* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S apv = arow[p];
      const S* brow = b + static_cast<size_t>(p) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) crow[j] += apv * brow[j];
    }
  }
}

// C += A * B^T: C[i,j] = sum_p A[i,p] B[j,p]. Rows of both are contiguous.
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m >= 64)
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<size_t>(i) * k;
    S* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = b + static_cast<size_t>(j) * k;
      S acc = S(0);
#pragma omp simd reduction(+ : acc)
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A^T * B: C[p,j] = sum_i A[i,p] B[i,j].
template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  // Serial over i: every i touches all of C.
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<size_t>(i) * k;
    const S* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S apv = arow[p];
      S* crow = c + static_cast<size_t>(p) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) crow[j] += apv * brow[j];
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ContractViolation("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::mm_nn(a.values().data(), b.values().data(), out.values_mut().data(), m, k, n, false);
  detail::ensure_finite(out, "matmul");
  detail::record("matmul", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nt_acc(on->grad.data(), bn->values.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn_acc(an->values.data(), on->grad.data(), bn->grad.data(), m, k, n);
    }
  });
  return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& x) {
  if (x.shape().size() != 2)
    throw ContractViolation("transpose2d: need rank 2, got " + shape_str(x.shape()));
  const int m = x.shape()[0], n = x.shape()[1];
  Tensor<S> out = Tensor<S>::zeros({n, m});
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        ov[static_cast<size_t>(j) * m + i] = xv[static_cast<size_t>(i) * n + j];
  }
  detail::record("transpose2d", {x}, out, [xn = x.node(), on = out.node(), m, n] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        xn->grad[static_cast<size_t>(i) * n + j] += on->grad[static_cast<size_t>(j) * m + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (full reduction to a scalar)

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = S(0);
  for (S v : x.values()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::ensure_finite(out, "sum");
  detail::record("sum", {x}, out, [xn = x.node(), on = out.node()] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    const S g = on->grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.numel());
  S acc = S(0);
  for (S v : x.values()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc * inv);
  detail::ensure_finite(out, "mean");
  detail::record("mean", {x}, out, [xn = x.node(), on = out.node(), inv] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    const S g = on->grad[0] * inv;
    for (auto& gv : xn->grad) gv += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ContractViolation("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                            " changes element count");
  Tensor<S> out = Tensor<S>::from(std::move(shape), std::vector<S>(x.values().begin(), x.values().end()));
  detail::record("reshape", {x}, out, [xn = x.node(), on = out.node()] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
  return out;
}

namespace detail {
// Decompose a shape around `axis` into (outer, axis_dim, inner) extents.
inline void axis_extents(const Shape& s, int axis, size_t& outer, size_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[i]);
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= static_cast<size_t>(s[i]);
}
}  // namespace detail

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int begin, int end) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ContractViolation("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  if (begin < 0 || end > s[axis] || begin >= end)
    throw ContractViolation("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") invalid for axis extent " + std::to_string(s[axis]));
  size_t outer, inner;
  detail::axis_extents(s, axis, outer, inner);
  const size_t dim = static_cast<size_t>(s[axis]);
  const size_t span = static_cast<size_t>(end - begin);

  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    for (size_t o = 0; o < outer; ++o)
      for (size_t a = 0; a < span; ++a)
        for (size_t i = 0; i < inner; ++i)
          ov[(o * span + a) * inner + i] = xv[(o * dim + begin + a) * inner + i];
  }
  detail::record("slice", {x}, out,
                 [xn = x.node(), on = out.node(), outer, inner, dim, span, begin] {
                   if (on->grad.empty() || !xn->requires_grad) return;
                   xn->ensure_grad();
                   for (size_t o = 0; o < outer; ++o)
                     for (size_t a = 0; a < span; ++a)
                       for (size_t i = 0; i < inner; ++i)
                         xn->grad[(o * dim + begin + a) * inner + i] +=
                             on->grad[(o * span + a) * inner + i];
                 });
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(first.size()))
    throw ContractViolation("concat: axis " + std::to_string(axis) + " out of range");
  int total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size())
      throw ContractViolation("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != first[i])
        throw ContractViolation("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
    total_axis += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  size_t outer, inner;
  detail::axis_extents(out_shape, axis, outer, inner);
  {
    auto ov = out.values_mut();
    size_t offset = 0;
    for (const auto& p : parts) {
      const size_t span = static_cast<size_t>(p.shape()[axis]);
      auto pv = p.values();
      for (size_t o = 0; o < outer; ++o)
        for (size_t a = 0; a < span; ++a)
          for (size_t i = 0; i < inner; ++i)
            ov[(o * static_cast<size_t>(total_axis) + offset + a) * inner + i] =
                pv[(o * span + a) * inner + i];
      offset += span;
    }
  }

  // Record one rule per input part so each scatters its own gradient block.
  size_t offset = 0;
  for (const auto& p : parts) {
    const size_t span = static_cast<size_t>(p.shape()[axis]);
    Tensor<S> out_alias = out;  // same node
    detail::record("concat", {p}, out_alias,
                   [pn = p.node(), on = out.node(), outer, inner, span, offset,
                    total = static_cast<size_t>(total_axis)] {
                     if (on->grad.empty() || !pn->requires_grad) return;
                     pn->ensure_grad();
                     for (size_t o = 0; o < outer; ++o)
                       for (size_t a = 0; a < span; ++a)
                         for (size_t i = 0; i < inner; ++i)
                           pn->grad[(o * span + a) * inner + i] +=
                               on->grad[(o * total + offset + a) * inner + i];
                   });
    offset += span;
  }
  return out;
}

// Repeat a [d] or [1,d] row n times -> [n,d]. Backward sums over rows.
template <typename S>
Tensor<S> repeat_rows(const Tensor<S>& x, int n) {
  const size_t d = x.numel();
  if (x.shape().size() > 2 || (x.shape().size() == 2 && x.shape()[0] != 1))
    throw ContractViolation("repeat_rows: need [d] or [1,d], got " + shape_str(x.shape()));
  if (n < 1) throw ContractViolation("repeat_rows: n must be >= 1");
  Tensor<S> out = Tensor<S>::zeros({n, static_cast<int>(d)});
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    for (int r = 0; r < n; ++r)
      for (size_t i = 0; i < d; ++i) ov[static_cast<size_t>(r) * d + i] = xv[i];
  }
  detail::record("repeat_rows", {x}, out, [xn = x.node(), on = out.node(), n, d] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (int r = 0; r < n; ++r)
      for (size_t i = 0; i < d; ++i) xn->grad[i] += on->grad[static_cast<size_t>(r) * d + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy: logits [B,C], integer labels, mean loss over rows.

template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2)
    throw ContractViolation("softmax_cross_entropy: logits must be [B,C]");
  const int b = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<int>(labels.size()) != b)
    throw ContractViolation("softmax_cross_entropy: " + std::to_string(labels.size()) +
                            " labels for " + std::to_string(b) + " rows");
  for (int lab : labels)
    if (lab < 0 || lab >= c)
      throw ContractViolation("softmax_cross_entropy: label " + std::to_string(lab) +
                              " out of range [0," + std::to_string(c) + ")");

  std::vector<S> probs(static_cast<size_t>(b) * c);
  auto lv = logits.values();
  S loss = S(0);
  for (int i = 0; i < b; ++i) {
    const S* row = lv.data() + static_cast<size_t>(i) * c;
    S m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    S z = S(0);
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - m);
    const S log_z = m + std::log(z);
    for (int j = 0; j < c; ++j) probs[static_cast<size_t>(i) * c + j] = std::exp(row[j] - log_z);
    loss += log_z - row[labels[i]];
  }
  Tensor<S> out = Tensor<S>::scalar(loss / static_cast<S>(b));
  detail::ensure_finite(out, "softmax_cross_entropy");
  detail::record("softmax_cross_entropy", {logits}, out,
                 [xn = logits.node(), on = out.node(), probs = std::move(probs), labels, b, c] {
                   if (on->grad.empty() || !xn->requires_grad) return;
                   xn->ensure_grad();
                   const S g = on->grad[0] / static_cast<S>(b);
                   for (int i = 0; i < b; ++i)
                     for (int j = 0; j < c; ++j) {
                       S p = probs[static_cast<size_t>(i) * c + j];
                       if (j == labels[i]) p -= S(1);
                       xn->grad[static_cast<size_t>(i) * c + j] += g * p;
                     }
                 });
  return out;
}

// Row-wise softmax of raw values (no recording); for accuracy evaluation.
template <typename S>
std::vector<S> softmax_rows(const Tensor<S>& logits) {
  if (logits.shape().size() != 2)
    throw ContractViolation("softmax_rows: logits must be [B,C]");
  const int b = logits.shape()[0], c = logits.shape()[1];
  std::vector<S> probs(static_cast<size_t>(b) * c);
  auto lv = logits.values();
  for (int i = 0; i < b; ++i) {
    const S* row = lv.data() + static_cast<size_t>(i) * c;
    S m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    S z = S(0);
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - m);
    for (int j = 0; j < c; ++j) probs[static_cast<size_t>(i) * c + j] = std::exp(row[j] - m) / z;
  }
  return probs;
}

}  // namespace ctrlnerf::ad
