#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "grqo/rng.hpp"

namespace grqo {

namespace detail {

// Fixed 64-byte alignment for all matrix storage (one full vector register on
// the widest SIMD ISA in play). Vectorized kernels choose
// their load/store split from the runtime address; with ordinary vector
// storage that split varies per allocation, which regroups floating-point
// sums and makes repeated runs differ in the last ulp. A constant alignment
// pins the split, making every run bit-reproducible.
template <typename T, std::size_t Align>
struct AlignedAlloc {
  using value_type = T;
  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U, Align>&) {}
  template <typename U>
  struct rebind {
    using other = AlignedAlloc<U, Align>;
  };
  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(Align));
  }
  friend bool operator==(const AlignedAlloc&, const AlignedAlloc&) { return true; }
  friend bool operator!=(const AlignedAlloc&, const AlignedAlloc&) { return false; }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense row-major matrix. The only tensor rank used anywhere is 2; vectors
// are n x 1 or 1 x n, scalars 1 x 1.
// ---------------------------------------------------------------------------

template <typename T>
struct MatT {
  using Buffer = std::vector<T, detail::AlignedAlloc<T, 64>>;

  int rows = 0;
  int cols = 0;
  Buffer d;

  MatT() = default;
  MatT(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, T(0)) {}

  static MatT zeros(int r, int c) { return MatT(r, c); }

  static MatT full(int r, int c, T v) {
    MatT m(r, c);
    std::fill(m.d.begin(), m.d.end(), v);
    return m;
  }

  static MatT scalar(T v) { return full(1, 1, v); }

  static MatT from(int r, int c, const std::vector<T>& values) {
    if (static_cast<std::size_t>(r) * c != values.size())
      throw std::invalid_argument("MatT::from: size mismatch");
    MatT m;
    m.rows = r;
    m.cols = c;
    m.d.assign(values.begin(), values.end());
    return m;
  }

  T& at(int r, int c) { return d[static_cast<std::size_t>(r) * cols + c]; }
  T at(int r, int c) const { return d[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return d.size(); }
  bool same_shape(const MatT& o) const { return rows == o.rows && cols == o.cols; }

  using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<EMat> map() { return Eigen::Map<EMat>(d.data(), rows, cols); }
  Eigen::Map<const EMat> map() const {
    return Eigen::Map<const EMat>(d.data(), rows, cols);
  }
};

using Mat = MatT<float>;
using MatD = MatT<double>;

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes own their parents through shared_ptr; dropping the
// root frees the whole graph except leaves still referenced elsewhere.
// Backward order comes from an explicit post-order traversal, so it is
// deterministic and thread-independent.
// ---------------------------------------------------------------------------

// When false, ops skip recording backward closures (evaluation only).
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class NodeT {
public:
  MatT<T> value;
  MatT<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backprop;  // scatters this->grad into parents

  explicit NodeT(MatT<T> v, bool req = false)
      : value(std::move(v)), requires_grad(req) {}

  int rows() const { return value.rows; }
  int cols() const { return value.cols; }

  void accumulate(const MatT<T>& g) {
    if (grad.d.empty()) grad = MatT<T>::zeros(value.rows, value.cols);
    grad.map() += g.map();
  }

  void zero_grad() {
    if (!grad.d.empty()) std::fill(grad.d.begin(), grad.d.end(), T(0));
  }
};

template <typename T>
using Ptr = std::shared_ptr<NodeT<T>>;

template <typename T>
Ptr<T> constant(MatT<T> v) {
  return std::make_shared<NodeT<T>>(std::move(v), false);
}

template <typename T>
Ptr<T> leaf(MatT<T> v) {
  return std::make_shared<NodeT<T>>(std::move(v), true);
}

template <typename T>
Ptr<T> scalar_node(T v) {
  return constant(MatT<T>::scalar(v));
}

namespace detail {

template <typename T>
Ptr<T> make_op(MatT<T> value, std::vector<Ptr<T>> parents,
               std::function<void(NodeT<T>&)> backprop) {
  bool req = false;
  if (grad_enabled())
    for (const auto& p : parents)
      if (p->requires_grad) { req = true; break; }
  auto n = std::make_shared<NodeT<T>>(std::move(value), req);
  if (req) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

template <typename T>
void check_same_shape(const Ptr<T>& a, const Ptr<T>& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a->rows()) + "x" + std::to_string(a->cols()) +
                                " vs " + std::to_string(b->rows()) + "x" +
                                std::to_string(b->cols()));
}

}  // namespace detail

// Runs reverse accumulation from a scalar root. Leaf gradients are added to,
// not overwritten, so batched losses may call this repeatedly.
template <typename T>
void backward(const Ptr<T>& root) {
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;

  std::vector<NodeT<T>*> order;
  std::unordered_set<NodeT<T>*> seen;
  std::vector<std::pair<NodeT<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->accumulate(MatT<T>::scalar(T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<T>* n = *it;
    if (n->backprop && !n->grad.d.empty()) n->backprop(*n);
  }
  // Drop interior gradients; only leaves keep theirs.
  for (NodeT<T>* n : order)
    if (n->backprop) n->grad = MatT<T>();
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename T>
Ptr<T> add(const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "add");
  MatT<T> v = a->value;
  v.map() += b->value.map();
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
  });
}

template <typename T>
Ptr<T> sub(const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "sub");
  MatT<T> v = a->value;
  v.map() -= b->value.map();
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) {
      MatT<T> g = n.grad;
      g.map() = -g.map();
      n.parents[1]->accumulate(g);
    }
  });
}

template <typename T>
Ptr<T> mul(const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "mul");
  MatT<T> v = a->value;
  v.map() = v.map().cwiseProduct(b->value.map());
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    if (n.parents[0]->requires_grad) {
      MatT<T> g = n.grad;
      g.map() = g.map().cwiseProduct(n.parents[1]->value.map());
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      MatT<T> g = n.grad;
      g.map() = g.map().cwiseProduct(n.parents[0]->value.map());
      n.parents[1]->accumulate(g);
    }
  });
}

template <typename T>
Ptr<T> div(const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "div");
  MatT<T> v = a->value;
  v.map() = v.map().cwiseQuotient(b->value.map());
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      MatT<T> g = n.grad;
      g.map() = g.map().cwiseQuotient(bv.map());
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      MatT<T> g = n.grad;
      g.map() = -g.map().cwiseProduct(av.map()).cwiseQuotient(
          bv.map().cwiseProduct(bv.map()));
      n.parents[1]->accumulate(g);
    }
  });
}

template <typename T>
Ptr<T> scale(const Ptr<T>& a, T c) {
  MatT<T> v = a->value;
  v.map() *= c;
  return detail::make_op<T>(std::move(v), {a}, [c](NodeT<T>& n) {
    MatT<T> g = n.grad;
    g.map() *= c;
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> add_const(const Ptr<T>& a, T c) {
  MatT<T> v = a->value;
  v.map().array() += c;
  return detail::make_op<T>(std::move(v), {a}, [](NodeT<T>& n) {
    n.parents[0]->accumulate(n.grad);
  });
}

template <typename T>
Ptr<T> neg(const Ptr<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Ptr<T> matmul(const Ptr<T>& a, const Ptr<T>& b) {
  if (a->cols() != b->rows())
    throw std::invalid_argument("matmul: inner dims " + std::to_string(a->cols()) +
                                " vs " + std::to_string(b->rows()));
  MatT<T> v(a->rows(), b->cols());
  v.map().noalias() = a->value.map() * b->value.map();
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      MatT<T> g(av.rows, av.cols);
      g.map().noalias() = n.grad.map() * bv.map().transpose();
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      MatT<T> g(bv.rows, bv.cols);
      g.map().noalias() = av.map().transpose() * n.grad.map();
      n.parents[1]->accumulate(g);
    }
  });
}

template <typename T>
Ptr<T> transpose(const Ptr<T>& a) {
  MatT<T> v(a->cols(), a->rows());
  v.map() = a->value.map().transpose();
  return detail::make_op<T>(std::move(v), {a}, [](NodeT<T>& n) {
    MatT<T> g(n.value.cols, n.value.rows);
    g.map() = n.grad.map().transpose();
    n.parents[0]->accumulate(g);
  });
}

// Broadcast-add a 1 x c row vector to every row.
template <typename T>
Ptr<T> add_rowvec(const Ptr<T>& a, const Ptr<T>& v) {
  if (v->rows() != 1 || v->cols() != a->cols())
    throw std::invalid_argument("add_rowvec: want 1x" + std::to_string(a->cols()));
  MatT<T> out = a->value;
  out.map().rowwise() += v->value.map().row(0);
  return detail::make_op<T>(std::move(out), {a, v}, [](NodeT<T>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) {
      MatT<T> g(1, n.value.cols);
      g.map() = n.grad.map().colwise().sum();
      n.parents[1]->accumulate(g);
    }
  });
}

// Broadcast-multiply each row i by col[i] (n x 1 column vector).
template <typename T>
Ptr<T> mul_colvec(const Ptr<T>& a, const Ptr<T>& c) {
  if (c->cols() != 1 || c->rows() != a->rows())
    throw std::invalid_argument("mul_colvec: want " + std::to_string(a->rows()) + "x1");
  MatT<T> out = a->value;
  out.map().array().colwise() *= c->value.map().col(0).array();
  return detail::make_op<T>(std::move(out), {a, c}, [](NodeT<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& cv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      MatT<T> g = n.grad;
      g.map().array().colwise() *= cv.map().col(0).array();
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      MatT<T> g(av.rows, 1);
      g.map().col(0) = n.grad.map().cwiseProduct(av.map()).rowwise().sum();
      n.parents[1]->accumulate(g);
    }
  });
}

// Repeat a 1 x c row vector n times.
template <typename T>
Ptr<T> tile_rows(const Ptr<T>& v, int n) {
  if (v->rows() != 1) throw std::invalid_argument("tile_rows: want a row vector");
  MatT<T> out(n, v->cols());
  out.map().rowwise() = v->value.map().row(0);
  return detail::make_op<T>(std::move(out), {v}, [](NodeT<T>& n_) {
    MatT<T> g(1, n_.value.cols);
    g.map() = n_.grad.map().colwise().sum();
    n_.parents[0]->accumulate(g);
  });
}

namespace detail {

template <typename T, typename F, typename DF>
Ptr<T> unary_op(const Ptr<T>& a, F f, DF dfdx_from_xy) {
  MatT<T> v = a->value;
  for (auto& x : v.d) x = f(x);
  MatT<T> saved = v;
  return make_op<T>(std::move(v), {a}, [saved, dfdx_from_xy](NodeT<T>& n) {
    const auto& x = n.parents[0]->value;
    MatT<T> g = n.grad;
    for (std::size_t i = 0; i < g.d.size(); ++i)
      g.d[i] *= dfdx_from_xy(x.d[i], saved.d[i]);
    n.parents[0]->accumulate(g);
  });
}

}  // namespace detail

template <typename T>
Ptr<T> sigmoid(const Ptr<T>& a) {
  return detail::unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Ptr<T> exp_(const Ptr<T>& a) {
  return detail::unary_op(a, [](T x) { return std::exp(x); },
                          [](T, T y) { return y; });
}

template <typename T>
Ptr<T> log_(const Ptr<T>& a) {
  return detail::unary_op(a, [](T x) { return std::log(x); },
                          [](T x, T) { return T(1) / x; });
}

template <typename T>
Ptr<T> sqrt_(const Ptr<T>& a) {
  return detail::unary_op(a, [](T x) { return std::sqrt(x); },
                          [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
Ptr<T> abs_(const Ptr<T>& a) {
  return detail::unary_op(a, [](T x) { return std::abs(x); },
                          [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

// x^p for x >= 0 (exponent is a constant).
template <typename T>
Ptr<T> powc(const Ptr<T>& a, T p) {
  return detail::unary_op(a, [p](T x) { return std::pow(x, p); },
                          [p](T x, T y) { return x == T(0) ? T(0) : p * y / x; });
}

template <typename T>
Ptr<T> gelu(const Ptr<T>& a) {
  // Exact erf form; derivative is Phi(x) + x*phi(x).
  constexpr double kInvSqrt2 = 0.7071067811865476;
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return detail::unary_op(
      a,
      [](T x) {
        return T(0.5) * x * (T(1) + T(std::erf(double(x) * kInvSqrt2)));
      },
      [](T x, T) {
        const double phi = 0.5 * (1.0 + std::erf(double(x) * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x));
        return T(phi + double(x) * pdf);
      });
}

template <typename T>
Ptr<T> clamp_min(const Ptr<T>& a, T lo) {
  return detail::unary_op(a, [lo](T x) { return x < lo ? lo : x; },
                          [lo](T x, T) { return x < lo ? T(0) : T(1); });
}

template <typename T>
Ptr<T> emin(const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "emin");
  MatT<T> v = a->value;
  v.map() = v.map().cwiseMin(b->value.map());
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    for (int k = 0; k < 2; ++k) {
      if (!n.parents[k]->requires_grad) continue;
      MatT<T> g = n.grad;
      for (std::size_t i = 0; i < g.d.size(); ++i) {
        const bool first_wins = av.d[i] <= bv.d[i];
        g.d[i] *= (k == 0 ? (first_wins ? T(1) : T(0)) : (first_wins ? T(0) : T(1)));
      }
      n.parents[k]->accumulate(g);
    }
  });
}

template <typename T>
Ptr<T> emax(const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "emax");
  MatT<T> v = a->value;
  v.map() = v.map().cwiseMax(b->value.map());
  return detail::make_op<T>(std::move(v), {a, b}, [](NodeT<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    for (int k = 0; k < 2; ++k) {
      if (!n.parents[k]->requires_grad) continue;
      MatT<T> g = n.grad;
      for (std::size_t i = 0; i < g.d.size(); ++i) {
        const bool first_wins = av.d[i] >= bv.d[i];
        g.d[i] *= (k == 0 ? (first_wins ? T(1) : T(0)) : (first_wins ? T(0) : T(1)));
      }
      n.parents[k]->accumulate(g);
    }
  });
}

template <typename T>
Ptr<T> sum_all(const Ptr<T>& a) {
  MatT<T> v = MatT<T>::scalar(T(a->value.map().template cast<double>().sum()));
  return detail::make_op<T>(std::move(v), {a}, [](NodeT<T>& n) {
    MatT<T> g = MatT<T>::full(n.parents[0]->rows(), n.parents[0]->cols(), n.grad.d[0]);
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> mean_all(const Ptr<T>& a) {
  const T inv = T(1) / T(a->value.size());
  return scale(sum_all(a), inv);
}

template <typename T>
Ptr<T> row_sum(const Ptr<T>& a) {
  MatT<T> v(a->rows(), 1);
  v.map().col(0) = a->value.map().rowwise().sum();
  return detail::make_op<T>(std::move(v), {a}, [](NodeT<T>& n) {
    MatT<T> g(n.parents[0]->rows(), n.parents[0]->cols());
    g.map().colwise() = n.grad.map().col(0);
    n.parents[0]->accumulate(g);
  });
}

// Max over the column axis: n x c -> n x 1, gradient routed to the argmax
// (first occurrence on ties).
template <typename T>
Ptr<T> row_max(const Ptr<T>& a) {
  MatT<T> v(a->rows(), 1);
  std::vector<int> arg(static_cast<std::size_t>(a->rows()));
  for (int r = 0; r < a->rows(); ++r) {
    int best = 0;
    T bv = a->value.at(r, 0);
    for (int c = 1; c < a->cols(); ++c)
      if (a->value.at(r, c) > bv) { bv = a->value.at(r, c); best = c; }
    v.at(r, 0) = bv;
    arg[static_cast<std::size_t>(r)] = best;
  }
  return detail::make_op<T>(std::move(v), {a}, [arg](NodeT<T>& n) {
    MatT<T> g = MatT<T>::zeros(n.parents[0]->rows(), n.parents[0]->cols());
    for (int r = 0; r < g.rows; ++r)
      g.at(r, arg[static_cast<std::size_t>(r)]) = n.grad.at(r, 0);
    n.parents[0]->accumulate(g);
  });
}

// Row-wise softmax with an optional constant additive bias (attention masks,
// locality priors). The bias is not differentiated.
template <typename T>
Ptr<T> softmax_rows(const Ptr<T>& a, const MatT<T>* bias = nullptr) {
  MatT<T> v = a->value;
  if (bias) {
    if (!bias->same_shape(v)) throw std::invalid_argument("softmax_rows: bias shape");
    v.map() += bias->map();
  }
  for (int r = 0; r < v.rows; ++r) {
    T m = v.at(r, 0);
    for (int c = 1; c < v.cols; ++c) m = std::max(m, v.at(r, c));
    double s = 0.0;
    for (int c = 0; c < v.cols; ++c) {
      const T e = std::exp(v.at(r, c) - m);
      v.at(r, c) = e;
      s += double(e);
    }
    const T inv = T(1.0 / s);
    for (int c = 0; c < v.cols; ++c) v.at(r, c) *= inv;
  }
  MatT<T> y = v;
  return detail::make_op<T>(std::move(v), {a}, [y](NodeT<T>& n) {
    MatT<T> g = n.grad;
    for (int r = 0; r < g.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < g.cols; ++c) dot += double(g.at(r, c)) * double(y.at(r, c));
      for (int c = 0; c < g.cols; ++c)
        g.at(r, c) = (g.at(r, c) - T(dot)) * y.at(r, c);
    }
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> log_softmax_rows(const Ptr<T>& a) {
  MatT<T> v = a->value;
  for (int r = 0; r < v.rows; ++r) {
    T m = v.at(r, 0);
    for (int c = 1; c < v.cols; ++c) m = std::max(m, v.at(r, c));
    double s = 0.0;
    for (int c = 0; c < v.cols; ++c) s += std::exp(double(v.at(r, c) - m));
    const T lse = m + T(std::log(s));
    for (int c = 0; c < v.cols; ++c) v.at(r, c) -= lse;
  }
  MatT<T> y = v;
  return detail::make_op<T>(std::move(v), {a}, [y](NodeT<T>& n) {
    MatT<T> g = n.grad;
    for (int r = 0; r < g.rows; ++r) {
      double rowsum = 0.0;
      for (int c = 0; c < g.cols; ++c) rowsum += double(g.at(r, c));
      for (int c = 0; c < g.cols; ++c)
        g.at(r, c) -= T(rowsum * std::exp(double(y.at(r, c))));
    }
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> layer_norm_rows(const Ptr<T>& x, const Ptr<T>& gain, const Ptr<T>& bias,
                       T eps = T(1e-5)) {
  if (gain->rows() != 1 || gain->cols() != x->cols() || bias->rows() != 1 ||
      bias->cols() != x->cols())
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1 x cols");
  const int R = x->rows(), C = x->cols();
  MatT<T> xhat(R, C);
  std::vector<T> inv_std(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += double(x->value.at(r, c));
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      const double dvc = double(x->value.at(r, c)) - mu;
      var += dvc * dvc;
    }
    var /= C;
    const T is = T(1.0 / std::sqrt(var + double(eps)));
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < C; ++c)
      xhat.at(r, c) = (x->value.at(r, c) - T(mu)) * is;
  }
  MatT<T> v(R, C);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      v.at(r, c) = xhat.at(r, c) * gain->value.at(0, c) + bias->value.at(0, c);
  MatT<T> xhat_saved = xhat;
  return detail::make_op<T>(
      std::move(v), {x, gain, bias}, [xhat_saved, inv_std](NodeT<T>& n) {
        const int R = n.value.rows, C = n.value.cols;
        auto& xp = n.parents[0];
        auto& gp = n.parents[1];
        auto& bp = n.parents[2];
        if (gp->requires_grad) {
          MatT<T> gg(1, C);
          for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int r = 0; r < R; ++r)
              s += double(n.grad.at(r, c)) * double(xhat_saved.at(r, c));
            gg.at(0, c) = T(s);
          }
          gp->accumulate(gg);
        }
        if (bp->requires_grad) {
          MatT<T> gb(1, C);
          for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int r = 0; r < R; ++r) s += double(n.grad.at(r, c));
            gb.at(0, c) = T(s);
          }
          bp->accumulate(gb);
        }
        if (xp->requires_grad) {
          MatT<T> gx(R, C);
          for (int r = 0; r < R; ++r) {
            // dL/dxhat = grad * gain; standard layer-norm backward.
            double mean_dy = 0.0, mean_dyxh = 0.0;
            std::vector<double> dyh(static_cast<std::size_t>(C));
            for (int c = 0; c < C; ++c) {
              const double dy = double(n.grad.at(r, c)) * double(gp->value.at(0, c));
              dyh[static_cast<std::size_t>(c)] = dy;
              mean_dy += dy;
              mean_dyxh += dy * double(xhat_saved.at(r, c));
            }
            mean_dy /= C;
            mean_dyxh /= C;
            for (int c = 0; c < C; ++c) {
              const double xh = double(xhat_saved.at(r, c));
              gx.at(r, c) = T(double(inv_std[static_cast<std::size_t>(r)]) *
                              (dyh[static_cast<std::size_t>(c)] - mean_dy - xh * mean_dyxh));
            }
          }
          xp->accumulate(gx);
        }
      });
}

template <typename T>
Ptr<T> l2_normalize_rows(const Ptr<T>& x, T eps = T(1e-12)) {
  const int R = x->rows(), C = x->cols();
  MatT<T> v(R, C);
  std::vector<T> inv_norm(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += double(x->value.at(r, c)) * double(x->value.at(r, c));
    const T in = T(1.0 / std::sqrt(s + double(eps)));
    inv_norm[static_cast<std::size_t>(r)] = in;
    for (int c = 0; c < C; ++c) v.at(r, c) = x->value.at(r, c) * in;
  }
  MatT<T> y = v;
  return detail::make_op<T>(std::move(v), {x}, [y, inv_norm](NodeT<T>& n) {
    const int R = n.value.rows, C = n.value.cols;
    MatT<T> g(R, C);
    for (int r = 0; r < R; ++r) {
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += double(n.grad.at(r, c)) * double(y.at(r, c));
      for (int c = 0; c < C; ++c)
        g.at(r, c) = (n.grad.at(r, c) - T(dot) * y.at(r, c)) *
                     inv_norm[static_cast<std::size_t>(r)];
    }
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> slice_cols(const Ptr<T>& a, int c0, int c1) {
  if (c0 < 0 || c1 > a->cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  MatT<T> v(a->rows(), c1 - c0);
  v.map() = a->value.map().middleCols(c0, c1 - c0);
  return detail::make_op<T>(std::move(v), {a}, [c0](NodeT<T>& n) {
    MatT<T> g = MatT<T>::zeros(n.parents[0]->rows(), n.parents[0]->cols());
    g.map().middleCols(c0, n.value.cols) = n.grad.map();
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> slice_rows(const Ptr<T>& a, int r0, int r1) {
  if (r0 < 0 || r1 > a->rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  MatT<T> v(r1 - r0, a->cols());
  v.map() = a->value.map().middleRows(r0, r1 - r0);
  return detail::make_op<T>(std::move(v), {a}, [r0](NodeT<T>& n) {
    MatT<T> g = MatT<T>::zeros(n.parents[0]->rows(), n.parents[0]->cols());
    g.map().middleRows(r0, n.value.rows) = n.grad.map();
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> gather_rows(const Ptr<T>& a, std::vector<int> idx) {
  MatT<T> v(static_cast<int>(idx.size()), a->cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a->rows())
      throw std::invalid_argument("gather_rows: index out of range");
    v.map().row(static_cast<int>(i)) = a->value.map().row(idx[i]);
  }
  return detail::make_op<T>(std::move(v), {a}, [idx](NodeT<T>& n) {
    MatT<T> g = MatT<T>::zeros(n.parents[0]->rows(), n.parents[0]->cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      g.map().row(idx[i]) += n.grad.map().row(static_cast<int>(i));
    n.parents[0]->accumulate(g);
  });
}

template <typename T>
Ptr<T> concat_rows(const std::vector<Ptr<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int C = parts[0]->cols();
  int R = 0;
  for (const auto& p : parts) {
    if (p->cols() != C) throw std::invalid_argument("concat_rows: col mismatch");
    R += p->rows();
  }
  MatT<T> v(R, C);
  int r = 0;
  for (const auto& p : parts) {
    v.map().middleRows(r, p->rows()) = p->value.map();
    r += p->rows();
  }
  return detail::make_op<T>(std::move(v), parts, [](NodeT<T>& n) {
    int r = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        MatT<T> g(p->rows(), p->cols());
        g.map() = n.grad.map().middleRows(r, p->rows());
        p->accumulate(g);
      }
      r += p->rows();
    }
  });
}

template <typename T>
Ptr<T> concat_cols(const std::vector<Ptr<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const int R = parts[0]->rows();
  int C = 0;
  for (const auto& p : parts) {
    if (p->rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
    C += p->cols();
  }
  MatT<T> v(R, C);
  int c = 0;
  for (const auto& p : parts) {
    v.map().middleCols(c, p->cols()) = p->value.map();
    c += p->cols();
  }
  return detail::make_op<T>(std::move(v), parts, [](NodeT<T>& n) {
    int c = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        MatT<T> g(p->rows(), p->cols());
        g.map() = n.grad.map().middleCols(c, p->cols());
        p->accumulate(g);
      }
      c += p->cols();
    }
  });
}

// Cuts the graph: same values, no history.
template <typename T>
Ptr<T> detach(const Ptr<T>& a) {
  return constant(a->value);
}

// ---------------------------------------------------------------------------
// Parameter initialization helpers
// ---------------------------------------------------------------------------

template <typename T>
MatT<T> xavier_init(int rows, int cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / (rows + cols));
  MatT<T> m(rows, cols);
  for (auto& x : m.d) x = T(rng.uniform(-bound, bound));
  return m;
}

template <typename T>
MatT<T> normal_init(int rows, int cols, double stddev, Rng& rng) {
  MatT<T> m(rows, cols);
  for (auto& x : m.d) x = T(rng.normal() * stddev);
  return m;
}

}  // namespace grqo
