#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "acmn/common.hpp"
#include "acmn/kernels.hpp"

// Reverse-mode automatic differentiation on a per-sample tape.  Nodes are
// recorded in creation order; backward() walks them in reverse and each node's
// closure accumulates into its inputs' gradient buffers.  Parameter leaves
// view external storage for both values and gradients, so one set of weights
// can serve many tapes and gradients sum across reuse.  The scalar type is a
// template parameter: float for training, double for finite-difference and
// reference checks.

namespace acmn {

template <typename T>
class Tape;

template <typename T>
struct TapeNode {
  Shape shape;
  std::size_t n = 0;
  std::vector<T> value_store;  // empty when values view external/other storage
  const T* values = nullptr;
  std::vector<T> grad_store;  // empty when grad points at an external sink
  T* grad = nullptr;
  bool requires_grad = false;
  std::function<void()> backward;
};

template <typename T>
struct Var {
  TapeNode<T>* node = nullptr;
  Tape<T>* tape = nullptr;

  bool valid() const { return node != nullptr; }
  const Shape& shape() const { return node->shape; }
  std::size_t size() const { return node->n; }
  const T* data() const { return node->values; }
  T* grad() const { return node->grad; }
  T scalar() const {
    if (node->n != 1) throw ShapeError("scalar() on non-scalar " + shape_str(node->shape));
    return node->values[0];
  }
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Fresh node owning zero-initialized storage; grads allocated when needed.
  Var<T> make(Shape shape, bool requires_grad) {
    TapeNode<T>& n = nodes_.emplace_back();
    n.shape = std::move(shape);
    n.n = numel(n.shape);
    n.value_store.resize(n.n);
    n.values = n.value_store.data();
    n.requires_grad = requires_grad && recording_;
    if (n.requires_grad) {
      n.grad_store.assign(n.n, T(0));
      n.grad = n.grad_store.data();
    }
    return {&n, this};
  }

  Var<T> constant(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size())
      throw ShapeError("constant: " + shape_str(shape) + " vs " +
                       std::to_string(values.size()) + " values");
    TapeNode<T>& n = nodes_.emplace_back();
    n.shape = std::move(shape);
    n.n = values.size();
    n.value_store = std::move(values);
    n.values = n.value_store.data();
    return {&n, this};
  }

  // Non-owning constant; the pointed-to storage must outlive the tape.
  Var<T> constant_view(Shape shape, const T* values) {
    TapeNode<T>& n = nodes_.emplace_back();
    n.shape = std::move(shape);
    n.n = numel(n.shape);
    n.values = values;
    return {&n, this};
  }

  constexpr static T* kNoGrad = nullptr;

  // Parameter leaf: values and (optional) gradient sink live outside the
  // tape.  Gradients accumulate into the sink, which the caller zeroes.
  Var<T> leaf(Shape shape, const T* values, T* grad_sink) {
    TapeNode<T>& n = nodes_.emplace_back();
    n.shape = std::move(shape);
    n.n = numel(n.shape);
    n.values = values;
    if (grad_sink != nullptr && recording_) {
      n.grad = grad_sink;
      n.requires_grad = true;
    }
    return {&n, this};
  }

  // Seeds d(loss)/d(loss) = 1 and runs every node's closure in reverse
  // creation order.  Call once per recorded graph.
  void backward(Var<T> loss) {
    if (!recording_) throw ContractError("backward: tape is not recording");
    if (loss.tape != this) throw ContractError("backward: loss from another tape");
    if (loss.node->n != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.node->shape));
    if (!loss.node->requires_grad) return;  // loss does not depend on any leaf
    loss.node->grad[0] += T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      TapeNode<T>& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward();
    }
  }

 private:
  std::deque<TapeNode<T>> nodes_;  // deque keeps node addresses stable
  bool recording_;
};

namespace detail {

template <typename T>
Tape<T>* same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("operands from different tapes");
  return a.tape;
}

template <typename T>
void require_shape(Var<T> v, const Shape& want, const char* op) {
  if (v.node->shape != want)
    throw ShapeError(std::string(op) + ": expected " + shape_str(want) +
                     ", got " + shape_str(v.node->shape));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

// add/sub/mul accept equal shapes, or a scalar on either side.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b);
  if (a.node->n == 1 && b.node->n != 1) std::swap(a, b);
  bool scalar_rhs = (b.node->n == 1 && a.node->n != 1);
  if (!scalar_rhs && a.node->shape != b.node->shape)
    throw ShapeError("add: " + shape_str(a.node->shape) + " vs " + shape_str(b.node->shape));
  bool rg = a.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(a.node->shape, rg);
  T* y = out.node->value_store.data();
  const T* xa = a.node->values;
  if (scalar_rhs) {
    T s = b.node->values[0];
    for (std::size_t i = 0; i < a.node->n; ++i) y[i] = xa[i] + s;
  } else {
    const T* xb = b.node->values;
    for (std::size_t i = 0; i < a.node->n; ++i) y[i] = xa[i] + xb[i];
  }
  if (out.node->requires_grad) {
    TapeNode<T>*an = a.node, *bn = b.node, *on = out.node;
    out.node->backward = [an, bn, on, scalar_rhs] {
      if (an->requires_grad) kernels::axpy(an->grad, T(1), on->grad, on->n);
      if (bn->requires_grad) {
        if (scalar_rhs) {
          T s = 0;
          for (std::size_t i = 0; i < on->n; ++i) s += on->grad[i];
          bn->grad[0] += s;
        } else {
          kernels::axpy(bn->grad, T(1), on->grad, on->n);
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b);
  bool scalar_a = (a.node->n == 1 && b.node->n != 1);
  bool scalar_b = (b.node->n == 1 && a.node->n != 1);
  if (!scalar_a && !scalar_b && a.node->shape != b.node->shape)
    throw ShapeError("sub: " + shape_str(a.node->shape) + " vs " + shape_str(b.node->shape));
  const Shape& shape = scalar_a ? b.node->shape : a.node->shape;
  std::size_t n = scalar_a ? b.node->n : a.node->n;
  bool rg = a.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(shape, rg);
  T* y = out.node->value_store.data();
  const T* xa = a.node->values;
  const T* xb = b.node->values;
  if (scalar_a) {
    T s = xa[0];
    for (std::size_t i = 0; i < n; ++i) y[i] = s - xb[i];
  } else if (scalar_b) {
    T s = xb[0];
    for (std::size_t i = 0; i < n; ++i) y[i] = xa[i] - s;
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = xa[i] - xb[i];
  }
  if (out.node->requires_grad) {
    TapeNode<T>*an = a.node, *bn = b.node, *on = out.node;
    out.node->backward = [an, bn, on, scalar_a, scalar_b] {
      if (an->requires_grad) {
        if (scalar_a) {
          T s = 0;
          for (std::size_t i = 0; i < on->n; ++i) s += on->grad[i];
          an->grad[0] += s;
        } else {
          kernels::axpy(an->grad, T(1), on->grad, on->n);
        }
      }
      if (bn->requires_grad) {
        if (scalar_b) {
          T s = 0;
          for (std::size_t i = 0; i < on->n; ++i) s += on->grad[i];
          bn->grad[0] -= s;
        } else {
          kernels::axpy(bn->grad, T(-1), on->grad, on->n);
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b);
  if (a.node->n == 1 && b.node->n != 1) std::swap(a, b);
  bool scalar_rhs = (b.node->n == 1 && a.node->n != 1);
  if (!scalar_rhs && a.node->shape != b.node->shape)
    throw ShapeError("mul: " + shape_str(a.node->shape) + " vs " + shape_str(b.node->shape));
  bool rg = a.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(a.node->shape, rg);
  T* y = out.node->value_store.data();
  const T* xa = a.node->values;
  const T* xb = b.node->values;
  if (scalar_rhs) {
    T s = xb[0];
    for (std::size_t i = 0; i < a.node->n; ++i) y[i] = xa[i] * s;
  } else {
    for (std::size_t i = 0; i < a.node->n; ++i) y[i] = xa[i] * xb[i];
  }
  if (out.node->requires_grad) {
    TapeNode<T>*an = a.node, *bn = b.node, *on = out.node;
    out.node->backward = [an, bn, on, scalar_rhs] {
      if (scalar_rhs) {
        if (an->requires_grad) kernels::axpy(an->grad, bn->values[0], on->grad, on->n);
        if (bn->requires_grad) {
          T s = 0;
          for (std::size_t i = 0; i < on->n; ++i) s += on->grad[i] * an->values[i];
          bn->grad[0] += s;
        }
      } else {
        if (an->requires_grad)
          for (std::size_t i = 0; i < on->n; ++i) an->grad[i] += on->grad[i] * bn->values[i];
        if (bn->requires_grad)
          for (std::size_t i = 0; i < on->n; ++i) bn->grad[i] += on->grad[i] * an->values[i];
      }
    };
  }
  return out;
}

// y = alpha * x + beta, elementwise with scalar constants.
template <typename T>
Var<T> scale_add(Var<T> x, T alpha, T beta) {
  Var<T> out = x.tape->make(x.node->shape, x.node->requires_grad);
  T* y = out.node->value_store.data();
  const T* xv = x.node->values;
  for (std::size_t i = 0; i < x.node->n; ++i) y[i] = alpha * xv[i] + beta;
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on, alpha] { kernels::axpy(xn->grad, alpha, on->grad, on->n); };
  }
  return out;
}

template <typename T>
Var<T> relu(Var<T> x) {
  Var<T> out = x.tape->make(x.node->shape, x.node->requires_grad);
  T* y = out.node->value_store.data();
  const T* xv = x.node->values;
  for (std::size_t i = 0; i < x.node->n; ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] {
      for (std::size_t i = 0; i < on->n; ++i)
        if (xn->values[i] > T(0)) xn->grad[i] += on->grad[i];
    };
  }
  return out;
}

template <typename T>
Var<T> tanh(Var<T> x) {
  Var<T> out = x.tape->make(x.node->shape, x.node->requires_grad);
  T* y = out.node->value_store.data();
  const T* xv = x.node->values;
  for (std::size_t i = 0; i < x.node->n; ++i) y[i] = std::tanh(xv[i]);
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] {
      for (std::size_t i = 0; i < on->n; ++i)
        xn->grad[i] += on->grad[i] * (T(1) - on->values[i] * on->values[i]);
    };
  }
  return out;
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Var<T> out = x.tape->make(x.node->shape, x.node->requires_grad);
  T* y = out.node->value_store.data();
  const T* xv = x.node->values;
  for (std::size_t i = 0; i < x.node->n; ++i) y[i] = T(1) / (T(1) + std::exp(-xv[i]));
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] {
      for (std::size_t i = 0; i < on->n; ++i) {
        T s = on->values[i];
        xn->grad[i] += on->grad[i] * s * (T(1) - s);
      }
    };
  }
  return out;
}

// Numerically stable softmax over a rank-1 input.
template <typename T>
Var<T> softmax(Var<T> x) {
  if (x.node->shape.size() != 1) throw ShapeError("softmax: expects rank-1, got " + shape_str(x.node->shape));
  Var<T> out = x.tape->make(x.node->shape, x.node->requires_grad);
  const T* xv = x.node->values;
  T* y = out.node->value_store.data();
  std::size_t n = x.node->n;
  T mx = xv[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[i]);
  T z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(xv[i] - mx);
    z += y[i];
  }
  T inv = T(1) / z;
  for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] {
      T dotgy = 0;
      for (std::size_t i = 0; i < on->n; ++i) dotgy += on->grad[i] * on->values[i];
      for (std::size_t i = 0; i < on->n; ++i)
        xn->grad[i] += on->values[i] * (on->grad[i] - dotgy);
    };
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> x) {
  Var<T> out = x.tape->make({1}, x.node->requires_grad);
  T s = 0;
  const T* xv = x.node->values;
  for (std::size_t i = 0; i < x.node->n; ++i) s += xv[i];
  out.node->value_store[0] = s;
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] {
      T g = on->grad[0];
      for (std::size_t i = 0; i < xn->n; ++i) xn->grad[i] += g;
    };
  }
  return out;
}

template <typename T>
Var<T> mean(Var<T> x) {
  Var<T> out = x.tape->make({1}, x.node->requires_grad);
  T s = 0;
  const T* xv = x.node->values;
  for (std::size_t i = 0; i < x.node->n; ++i) s += xv[i];
  out.node->value_store[0] = s / T(x.node->n);
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] {
      T g = on->grad[0] / T(xn->n);
      for (std::size_t i = 0; i < xn->n; ++i) xn->grad[i] += g;
    };
  }
  return out;
}

// ---- linear algebra --------------------------------------------------------

// a[m,k] * b[k,n] -> [m,n], or a[m,k] * b[k] -> [m].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b);
  if (a.node->shape.size() != 2) throw ShapeError("matmul: lhs must be rank-2, got " + shape_str(a.node->shape));
  int m = a.node->shape[0], k = a.node->shape[1];
  bool vec = (b.node->shape.size() == 1);
  if (vec) {
    if (b.node->shape[0] != k)
      throw ShapeError("matmul: " + shape_str(a.node->shape) + " vs " + shape_str(b.node->shape));
  } else if (b.node->shape.size() != 2 || b.node->shape[0] != k) {
    throw ShapeError("matmul: " + shape_str(a.node->shape) + " vs " + shape_str(b.node->shape));
  }
  int n = vec ? 1 : b.node->shape[1];
  bool rg = a.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(vec ? Shape{m} : Shape{m, n}, rg);
  T* y = out.node->value_store.data();
  if (vec)
    kernels::gemv(y, a.node->values, b.node->values, m, k);
  else
    kernels::gemm_nn(y, a.node->values, b.node->values, m, k, n);
  if (out.node->requires_grad) {
    TapeNode<T>*an = a.node, *bn = b.node, *on = out.node;
    out.node->backward = [an, bn, on, m, k, n, vec] {
      if (vec) {
        // da[m,k] += g[m] x[k]^T ; db[k] += a^T g
        if (an->requires_grad)
          kernels::gemm_nn<T, true>(an->grad, on->grad, bn->values, m, 1, k);
        if (bn->requires_grad)
          kernels::gemv_t_acc(bn->grad, an->values, on->grad, m, k);
      } else {
        if (an->requires_grad)
          kernels::gemm_nt<T, true>(an->grad, on->grad, bn->values, m, k, n);
        if (bn->requires_grad)
          kernels::gemm_tn<T, true>(bn->grad, an->values, on->grad, m, k, n);
      }
    };
  }
  return out;
}

// W[m,k] * x + b[m]; x may be [k] or a column batch [k,n] (bias per row).
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>* tape = detail::same_tape(x, w);
  detail::same_tape(x, b);
  if (w.node->shape.size() != 2) throw ShapeError("affine: W must be rank-2, got " + shape_str(w.node->shape));
  int m = w.node->shape[0], k = w.node->shape[1];
  detail::require_shape(b, {m}, "affine bias");
  bool vec = (x.node->shape.size() == 1);
  if (vec) {
    if (x.node->shape[0] != k)
      throw ShapeError("affine: W " + shape_str(w.node->shape) + " vs x " + shape_str(x.node->shape));
  } else if (x.node->shape.size() != 2 || x.node->shape[0] != k) {
    throw ShapeError("affine: W " + shape_str(w.node->shape) + " vs x " + shape_str(x.node->shape));
  }
  int n = vec ? 1 : x.node->shape[1];
  bool rg = x.node->requires_grad || w.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(vec ? Shape{m} : Shape{m, n}, rg);
  T* y = out.node->value_store.data();
  if (vec) {
    kernels::gemv(y, w.node->values, x.node->values, m, k);
    for (int i = 0; i < m; ++i) y[i] += b.node->values[i];
  } else {
    kernels::gemm_nn(y, w.node->values, x.node->values, m, k, n);
    for (int i = 0; i < m; ++i) {
      T bi = b.node->values[i];
      T* row = y + std::size_t(i) * n;
      for (int j = 0; j < n; ++j) row[j] += bi;
    }
  }
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *wn = w.node, *bn = b.node, *on = out.node;
    out.node->backward = [xn, wn, bn, on, m, k, n, vec] {
      if (vec) {
        if (wn->requires_grad)
          kernels::gemm_nn<T, true>(wn->grad, on->grad, xn->values, m, 1, k);
        if (xn->requires_grad)
          kernels::gemv_t_acc(xn->grad, wn->values, on->grad, m, k);
        if (bn->requires_grad) kernels::axpy(bn->grad, T(1), on->grad, std::size_t(m));
      } else {
        if (wn->requires_grad)
          kernels::gemm_nt<T, true>(wn->grad, on->grad, xn->values, m, k, n);
        if (xn->requires_grad)
          kernels::gemm_tn<T, true>(xn->grad, wn->values, on->grad, m, k, n);
        if (bn->requires_grad)
          for (int i = 0; i < m; ++i) {
            T s = 0;
            const T* row = on->grad + std::size_t(i) * n;
            for (int j = 0; j < n; ++j) s += row[j];
            bn->grad[i] += s;
          }
      }
    };
  }
  return out;
}

// ---- structure -------------------------------------------------------------

// View with a new shape; no copy, gradient passes through unchanged.
template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (numel(shape) != x.node->n)
    throw ShapeError("reshape: " + shape_str(x.node->shape) + " to " + shape_str(shape));
  Var<T> out = x.tape->make(std::move(shape), x.node->requires_grad);
  out.node->value_store.clear();
  out.node->value_store.shrink_to_fit();
  out.node->values = x.node->values;
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on] { kernels::axpy(xn->grad, T(1), on->grad, on->n); };
  }
  return out;
}

// Contiguous sub-range of a rank-1 tensor; values are a view.
template <typename T>
Var<T> slice(Var<T> x, int offset, int length) {
  if (x.node->shape.size() != 1) throw ShapeError("slice: expects rank-1, got " + shape_str(x.node->shape));
  if (offset < 0 || length < 1 || std::size_t(offset) + length > x.node->n)
    throw ShapeError("slice: [" + std::to_string(offset) + "," +
                     std::to_string(offset + length) + ") out of " + shape_str(x.node->shape));
  Var<T> out = x.tape->make({length}, x.node->requires_grad);
  out.node->value_store.clear();
  out.node->value_store.shrink_to_fit();
  out.node->values = x.node->values + offset;
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *on = out.node;
    out.node->backward = [xn, on, offset] {
      kernels::axpy(xn->grad + offset, T(1), on->grad, on->n);
    };
  }
  return out;
}

// Concatenation of rank-1 tensors.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  Tape<T>* tape = xs[0].tape;
  std::size_t total = 0;
  bool rg = false;
  for (Var<T> v : xs) {
    if (v.tape != tape) throw ContractError("concat: operands from different tapes");
    if (v.node->shape.size() != 1) throw ShapeError("concat: expects rank-1, got " + shape_str(v.node->shape));
    total += v.node->n;
    rg = rg || v.node->requires_grad;
  }
  Var<T> out = tape->make({int(total)}, rg);
  T* y = out.node->value_store.data();
  std::size_t off = 0;
  for (Var<T> v : xs) {
    std::copy(v.node->values, v.node->values + v.node->n, y + off);
    off += v.node->n;
  }
  if (out.node->requires_grad) {
    std::vector<TapeNode<T>*> ins;
    ins.reserve(xs.size());
    for (Var<T> v : xs) ins.push_back(v.node);
    TapeNode<T>* on = out.node;
    out.node->backward = [ins = std::move(ins), on] {
      std::size_t off = 0;
      for (TapeNode<T>* in : ins) {
        if (in->requires_grad) kernels::axpy(in->grad, T(1), on->grad + off, in->n);
        off += in->n;
      }
    };
  }
  return out;
}

// Row idx of a [rows, width] table, as a view (embedding lookup).
template <typename T>
Var<T> row(Var<T> table, int idx) {
  if (table.node->shape.size() != 2) throw ShapeError("row: expects rank-2, got " + shape_str(table.node->shape));
  int rows = table.node->shape[0], width = table.node->shape[1];
  if (idx < 0 || idx >= rows)
    throw ShapeError("row: index " + std::to_string(idx) + " out of " + shape_str(table.node->shape));
  Var<T> out = table.tape->make({width}, table.node->requires_grad);
  out.node->value_store.clear();
  out.node->value_store.shrink_to_fit();
  out.node->values = table.node->values + std::size_t(idx) * width;
  if (out.node->requires_grad) {
    TapeNode<T>*tn = table.node, *on = out.node;
    out.node->backward = [tn, on, idx, width] {
      kernels::axpy(tn->grad + std::size_t(idx) * width, T(1), on->grad, std::size_t(width));
    };
  }
  return out;
}

// ---- spatial helpers -------------------------------------------------------

namespace detail {

template <typename T>
std::pair<int, int> grid_of(Var<T> v, Var<T> att, const char* op) {
  std::size_t cells = att.node->n;
  const Shape& s = v.node->shape;
  if (att.node->shape.size() != 1) throw ShapeError(std::string(op) + ": attention must be rank-1");
  if (s.size() < 2) throw ShapeError(std::string(op) + ": features must be rank>=2, got " + shape_str(s));
  std::size_t trailing = 1;
  for (std::size_t i = 1; i < s.size(); ++i) trailing *= std::size_t(s[i]);
  if (trailing != cells)
    throw ShapeError(std::string(op) + ": features " + shape_str(s) + " vs attention " +
                     shape_str(att.node->shape));
  return {s[0], int(cells)};
}

}  // namespace detail

// out[c] = sum_p att[p] * v[c,p]; v may be [C,P] or [C,H,W] with H*W == P.
template <typename T>
Var<T> weighted_spatial_sum(Var<T> att, Var<T> v) {
  Tape<T>* tape = detail::same_tape(att, v);
  auto [c, p] = detail::grid_of(v, att, "weighted_spatial_sum");
  bool rg = att.node->requires_grad || v.node->requires_grad;
  Var<T> out = tape->make({c}, rg);
  kernels::gemv(out.node->value_store.data(), v.node->values, att.node->values, c, p);
  if (out.node->requires_grad) {
    TapeNode<T>*an = att.node, *vn = v.node, *on = out.node;
    out.node->backward = [an, vn, on, c, p] {
      if (an->requires_grad) kernels::gemv_t_acc(an->grad, vn->values, on->grad, c, p);
      if (vn->requires_grad)
        kernels::gemm_nn<T, true>(vn->grad, on->grad, an->values, c, 1, p);
    };
  }
  return out;
}

// out[c,p] = v[c,p] * m[p]; v may be [C,P] or [C,H,W].
template <typename T>
Var<T> mul_rows(Var<T> v, Var<T> m) {
  Tape<T>* tape = detail::same_tape(v, m);
  auto [c, p] = detail::grid_of(v, m, "mul_rows");
  bool rg = v.node->requires_grad || m.node->requires_grad;
  Var<T> out = tape->make(v.node->shape, rg);
  T* y = out.node->value_store.data();
  const T* vv = v.node->values;
  const T* mv = m.node->values;
  for (int ci = 0; ci < c; ++ci) {
    const T* vrow = vv + std::size_t(ci) * p;
    T* yrow = y + std::size_t(ci) * p;
    for (int j = 0; j < p; ++j) yrow[j] = vrow[j] * mv[j];
  }
  if (out.node->requires_grad) {
    TapeNode<T>*vn = v.node, *mn = m.node, *on = out.node;
    out.node->backward = [vn, mn, on, c, p] {
      if (vn->requires_grad)
        for (int ci = 0; ci < c; ++ci) {
          const T* grow = on->grad + std::size_t(ci) * p;
          T* vg = vn->grad + std::size_t(ci) * p;
          for (int j = 0; j < p; ++j) vg[j] += grow[j] * mn->values[j];
        }
      if (mn->requires_grad)
        for (int ci = 0; ci < c; ++ci) {
          const T* grow = on->grad + std::size_t(ci) * p;
          const T* vrow = vn->values + std::size_t(ci) * p;
          for (int j = 0; j < p; ++j) mn->grad[j] += grow[j] * vrow[j];
        }
    };
  }
  return out;
}

// out[r,c] = a[r,c] + col[r]: one bias value per row, broadcast across columns.
template <typename T>
Var<T> add_cols(Var<T> a, Var<T> col) {
  Tape<T>* tape = detail::same_tape(a, col);
  if (a.node->shape.size() != 2) throw ShapeError("add_cols: expects rank-2, got " + shape_str(a.node->shape));
  int r = a.node->shape[0], c = a.node->shape[1];
  detail::require_shape(col, {r}, "add_cols");
  bool rg = a.node->requires_grad || col.node->requires_grad;
  Var<T> out = tape->make(a.node->shape, rg);
  T* y = out.node->value_store.data();
  for (int i = 0; i < r; ++i) {
    const T* arow = a.node->values + std::size_t(i) * c;
    T bi = col.node->values[i];
    T* yrow = y + std::size_t(i) * c;
    for (int j = 0; j < c; ++j) yrow[j] = arow[j] + bi;
  }
  if (out.node->requires_grad) {
    TapeNode<T>*an = a.node, *cn = col.node, *on = out.node;
    out.node->backward = [an, cn, on, r, c] {
      if (an->requires_grad) kernels::axpy(an->grad, T(1), on->grad, on->n);
      if (cn->requires_grad)
        for (int i = 0; i < r; ++i) {
          T s = 0;
          const T* grow = on->grad + std::size_t(i) * c;
          for (int j = 0; j < c; ++j) s += grow[j];
          cn->grad[i] += s;
        }
    };
  }
  return out;
}

// Stack along the leading (channel) axis; trailing dimensions must agree.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b);
  const Shape& sa = a.node->shape;
  const Shape& sb = b.node->shape;
  if (sa.size() < 2 || sa.size() != sb.size() ||
      !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw ShapeError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  Shape shape = sa;
  shape[0] = sa[0] + sb[0];
  bool rg = a.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(std::move(shape), rg);
  T* y = out.node->value_store.data();
  std::copy(a.node->values, a.node->values + a.node->n, y);
  std::copy(b.node->values, b.node->values + b.node->n, y + a.node->n);
  if (out.node->requires_grad) {
    TapeNode<T>*an = a.node, *bn = b.node, *on = out.node;
    out.node->backward = [an, bn, on] {
      if (an->requires_grad) kernels::axpy(an->grad, T(1), on->grad, an->n);
      if (bn->requires_grad) kernels::axpy(bn->grad, T(1), on->grad + an->n, bn->n);
    };
  }
  return out;
}

// ---- convolution -----------------------------------------------------------

// x[ci,h,w] (*) k[co,ci,kh,kw], stride/pad symmetric.  Forward lowers to
// im2col + gemm; because the column rows are ordered (ci, ky, kx), the
// per-output accumulation order equals the naive quadruple loop's.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, int stride, int pad) {
  Tape<T>* tape = detail::same_tape(x, k);
  const Shape& xs = x.node->shape;
  const Shape& ks = k.node->shape;
  if (xs.size() != 3) throw ShapeError("conv2d: input must be [c,h,w], got " + shape_str(xs));
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be [co,ci,kh,kw], got " + shape_str(ks));
  if (ks[1] != xs[0])
    throw ShapeError("conv2d: input channels " + shape_str(xs) + " vs kernel " + shape_str(ks));
  if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >=1 and pad >=0");
  int ci = xs[0], h = xs[1], w = xs[2];
  int co = ks[0], kh = ks[2], kw = ks[3];
  int oh = kernels::conv_out_dim(h, kh, stride, pad);
  int ow = kernels::conv_out_dim(w, kw, stride, pad);
  int patch = ci * kh * kw;
  int cells = oh * ow;
  auto col = std::make_shared<std::vector<T>>(std::size_t(patch) * cells);
  kernels::im2col(x.node->values, ci, h, w, kh, kw, stride, pad, oh, ow, col->data());
  bool rg = x.node->requires_grad || k.node->requires_grad;
  Var<T> out = tape->make({co, oh, ow}, rg);
  kernels::gemm_nn(out.node->value_store.data(), k.node->values, col->data(), co, patch, cells);
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *kn = k.node, *on = out.node;
    out.node->backward = [xn, kn, on, col, ci, h, w, kh, kw, stride, pad, oh, ow, co, patch, cells] {
      if (kn->requires_grad) {
        // dK = dY * col^T has a small output and large inputs, so compute it
        // as an outer-product accumulation over transposed operands (each
        // operand streams through cache exactly once). Per element of dK the
        // sum runs over ascending cell index.
        std::vector<T> gt(std::size_t(cells) * co);
        std::vector<T> colt(std::size_t(cells) * patch);
        kernels::transpose(gt.data(), on->grad, co, cells);
        kernels::transpose(colt.data(), col->data(), patch, cells);
        kernels::gemm_tn<T, true>(kn->grad, gt.data(), colt.data(), cells, co, patch);
      }
      if (xn->requires_grad) {
        std::vector<T> dcol(std::size_t(patch) * cells);
        kernels::gemm_tn(dcol.data(), kn->values, on->grad, co, patch, cells);
        kernels::col2im_acc(dcol.data(), ci, h, w, kh, kw, stride, pad, oh, ow, xn->grad);
      }
    };
  }
  return out;
}

// out[c,:,:] = x[c,:,:] + b[c].
template <typename T>
Var<T> channel_bias(Var<T> x, Var<T> b) {
  Tape<T>* tape = detail::same_tape(x, b);
  const Shape& xs = x.node->shape;
  if (xs.size() != 3) throw ShapeError("channel_bias: input must be [c,h,w], got " + shape_str(xs));
  detail::require_shape(b, {xs[0]}, "channel_bias");
  int c = xs[0];
  std::size_t hw = std::size_t(xs[1]) * xs[2];
  bool rg = x.node->requires_grad || b.node->requires_grad;
  Var<T> out = tape->make(xs, rg);
  T* y = out.node->value_store.data();
  for (int i = 0; i < c; ++i) {
    const T* xrow = x.node->values + i * hw;
    T bi = b.node->values[i];
    T* yrow = y + i * hw;
    for (std::size_t j = 0; j < hw; ++j) yrow[j] = xrow[j] + bi;
  }
  if (out.node->requires_grad) {
    TapeNode<T>*xn = x.node, *bn = b.node, *on = out.node;
    out.node->backward = [xn, bn, on, c, hw] {
      if (xn->requires_grad) kernels::axpy(xn->grad, T(1), on->grad, on->n);
      if (bn->requires_grad)
        for (int i = 0; i < c; ++i) {
          T s = 0;
          const T* grow = on->grad + i * hw;
          for (std::size_t j = 0; j < hw; ++j) s += grow[j];
          bn->grad[i] += s;
        }
    };
  }
  return out;
}

// Left-to-right fold of add; empty input is a contract violation.
template <typename T>
Var<T> sum_vars(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("sum_vars: no inputs");
  Var<T> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

template <typename T>
int argmax(const T* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace acmn
