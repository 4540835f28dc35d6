#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "hsia/common.hpp"
#include "hsia/rng.hpp"

namespace hsia {

// Dense row-major tensor node participating in a reverse-mode tape.
// Templated on the scalar type: float is the normal path, double is the
// shadow path used by the gradient-check oracles.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { grad.clear(); }
  // Accumulated gradient, zero if none was ever written.
  T grad_at(std::int64_t i) const { return grad.empty() ? T(0) : grad[i]; }
};

template <class T>
using TensorT = std::shared_ptr<Node<T>>;

using Tensor = TensorT<float>;

// When false, ops do not record parents/backward closures. Used for
// inference paths so graphs are not retained.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <class T>
TensorT<T> make_tensor(Shape shape) {
  for (int e : shape)
    if (e <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
  auto n = std::make_shared<Node<T>>();
  n->data.assign(static_cast<size_t>(numel(shape)), T(0));
  n->shape = std::move(shape);
  return n;
}

template <class T>
TensorT<T> tensor_zeros(const Shape& shape) {
  return make_tensor<T>(shape);
}

template <class T>
TensorT<T> tensor_ones(const Shape& shape) {
  auto t = make_tensor<T>(shape);
  std::fill(t->data.begin(), t->data.end(), T(1));
  return t;
}

template <class T>
TensorT<T> tensor_uniform(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  auto t = make_tensor<T>(shape);
  Rng rng(seed);
  for (auto& v : t->data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
TensorT<T> tensor_trunc_normal(const Shape& shape, std::uint64_t seed, double std_dev) {
  auto t = make_tensor<T>(shape);
  Rng rng(seed);
  for (auto& v : t->data) v = static_cast<T>(rng.trunc_normal(std_dev));
  return t;
}

template <class T>
TensorT<T> tensor_from(const Shape& shape, const std::vector<T>& values) {
  auto t = make_tensor<T>(shape);
  if (static_cast<std::int64_t>(values.size()) != t->size())
    throw ShapeError("value count does not match " + shape_str(shape));
  t->data = values;
  return t;
}

// Fills from an Rng stream in registration order; used by module init.
template <class T>
TensorT<T> tensor_init_trunc_normal(const Shape& shape, Rng& rng, double std_dev) {
  auto t = make_tensor<T>(shape);
  for (auto& v : t->data) v = static_cast<T>(rng.trunc_normal(std_dev));
  return t;
}

namespace detail {

template <class T>
bool track(const std::initializer_list<TensorT<T>>& parents) {
  if (!grad_mode()) return false;
  for (const auto& p : parents)
    if (p && p->requires_grad) return true;
  return false;
}

template <class T>
void attach(TensorT<T>& out, std::initializer_list<TensorT<T>> parents,
            std::function<void(Node<T>&)> fn) {
  if (!track<T>(parents)) return;
  out->requires_grad = true;
  for (const auto& p : parents)
    if (p) out->parents.push_back(p);
  out->backward_fn = std::move(fn);
}

}  // namespace detail

// --- basic elementwise ops -------------------------------------------------

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  auto out = make_tensor<T>(a->shape);
  for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  detail::attach<T>(out, {a, b}, [a, b](Node<T>& o) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::int64_t i = 0; i < o.size(); ++i) a->grad[i] += o.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::int64_t i = 0; i < o.size(); ++i) b->grad[i] += o.grad[i];
    }
  });
  return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "sub");
  auto out = make_tensor<T>(a->shape);
  for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
  detail::attach<T>(out, {a, b}, [a, b](Node<T>& o) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::int64_t i = 0; i < o.size(); ++i) a->grad[i] += o.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::int64_t i = 0; i < o.size(); ++i) b->grad[i] -= o.grad[i];
    }
  });
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  auto out = make_tensor<T>(a->shape);
  for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
  detail::attach<T>(out, {a, b}, [a, b](Node<T>& o) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::int64_t i = 0; i < o.size(); ++i) a->grad[i] += o.grad[i] * b->data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::int64_t i = 0; i < o.size(); ++i) b->grad[i] += o.grad[i] * a->data[i];
    }
  });
  return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  auto out = make_tensor<T>(a->shape);
  for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * c;
  detail::attach<T>(out, {a}, [a, c](Node<T>& o) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < o.size(); ++i) a->grad[i] += o.grad[i] * c;
  });
  return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& a) {
  auto out = make_tensor<T>(Shape{1});
  T acc = T(0);
  for (std::int64_t i = 0; i < a->size(); ++i) acc += a->data[i];
  out->data[0] = acc;
  detail::attach<T>(out, {a}, [a](Node<T>& o) {
    a->ensure_grad();
    T g = o.grad[0];
    for (std::int64_t i = 0; i < a->size(); ++i) a->grad[i] += g;
  });
  return out;
}

template <class T>
TensorT<T> mean(const TensorT<T>& a) {
  auto s = sum(a);
  return scale(s, T(1) / static_cast<T>(a->size()));
}

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  if (numel(shape) != a->size())
    throw ShapeError("reshape " + shape_str(a->shape) + " -> " + shape_str(shape));
  auto out = make_tensor<T>(shape);
  out->data = a->data;
  detail::attach<T>(out, {a}, [a](Node<T>& o) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < o.size(); ++i) a->grad[i] += o.grad[i];
  });
  return out;
}

// Concatenate 2D tensors along rows. Column counts must match.
template <class T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  int cols = parts[0]->shape.at(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p->shape.size() != 2 || p->shape[1] != cols)
      throw ShapeError("concat_rows: inconsistent shapes");
    rows += p->shape[0];
  }
  auto out = make_tensor<T>(Shape{rows, cols});
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
    off += p->size();
  }
  bool need = false;
  if (grad_mode())
    for (const auto& p : parts)
      if (p->requires_grad) need = true;
  if (need) {
    out->requires_grad = true;
    out->parents.assign(parts.begin(), parts.end());
    auto copies = parts;
    out->backward_fn = [copies](Node<T>& o) {
      std::int64_t off2 = 0;
      for (const auto& p : copies) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t i = 0; i < p->size(); ++i) p->grad[i] += o.grad[off2 + i];
        }
        off2 += p->size();
      }
    };
  }
  return out;
}

// Rows [r0, r1) of a 2D tensor.
template <class T>
TensorT<T> slice_rows(const TensorT<T>& a, int r0, int r1) {
  if (a->shape.size() != 2 || r0 < 0 || r1 > a->shape[0] || r0 >= r1)
    throw ShapeError("slice_rows: bad range");
  int cols = a->shape[1];
  auto out = make_tensor<T>(Shape{r1 - r0, cols});
  std::copy(a->data.begin() + static_cast<std::int64_t>(r0) * cols,
            a->data.begin() + static_cast<std::int64_t>(r1) * cols, out->data.begin());
  detail::attach<T>(out, {a}, [a, r0, cols](Node<T>& o) {
    a->ensure_grad();
    std::int64_t base = static_cast<std::int64_t>(r0) * cols;
    for (std::int64_t i = 0; i < o.size(); ++i) a->grad[base + i] += o.grad[i];
  });
  return out;
}

// matmul: [m,k] x [k,n] -> [m,n]. Fixed left-to-right accumulation over k.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2)
    throw ShapeError("matmul expects 2D operands");
  int m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
  if (k != k2)
    throw ShapeError("matmul inner mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
  auto out = make_tensor<T>(Shape{m, n});
  const T* A = a->data.data();
  const T* B = b->data.data();
  T* C = out->data.data();
  for (int i = 0; i < m; ++i) {
    T* crow = C + static_cast<std::int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      T av = A[static_cast<std::int64_t>(i) * k + kk];
      if (av == T(0)) continue;
      const T* brow = B + static_cast<std::int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  detail::attach<T>(out, {a, b}, [a, b, m, k, n](Node<T>& o) {
    const T* G = o.grad.data();
    if (a->requires_grad) {
      a->ensure_grad();
      // dA = dC . B^T
      const T* B = b->data.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          T acc = T(0);
          const T* grow = G + static_cast<std::int64_t>(i) * n;
          const T* brow = B + static_cast<std::int64_t>(kk) * n;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          a->grad[static_cast<std::int64_t>(i) * k + kk] += acc;
        }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      // dB = A^T . dC
      const T* A = a->data.data();
      for (int i = 0; i < m; ++i) {
        const T* grow = G + static_cast<std::int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
          T av = A[static_cast<std::int64_t>(i) * k + kk];
          if (av == T(0)) continue;
          T* brow = b->grad.data() + static_cast<std::int64_t>(kk) * n;
          for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

// --- backward --------------------------------------------------------------

// Populates gradients of all reachable requires_grad nodes. Visits each node
// exactly once in reverse topological order.
template <class T>
void backward(const TensorT<T>& loss) {
  if (loss->size() != 1) throw ContractError("backward: loss must be scalar");
  if (!loss->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// Central finite differences evaluated on the tensor's own scalar type.
// Instantiate with T=double for the 64-bit oracle path.
template <class T, class F>
std::vector<T> finite_diff_grad(F&& f, const TensorT<T>& x, T eps) {
  if (eps <= T(0)) throw ContractError("finite_diff_grad: eps must be positive");
  std::vector<T> g(x->data.size());
  for (size_t i = 0; i < x->data.size(); ++i) {
    T saved = x->data[i];
    x->data[i] = saved + eps;
    T fp = f();
    x->data[i] = saved - eps;
    T fm = f();
    x->data[i] = saved;
    g[i] = (fp - fm) / (T(2) * eps);
  }
  return g;
}

}  // namespace hsia
