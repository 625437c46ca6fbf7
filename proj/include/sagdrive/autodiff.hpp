#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sagdrive/tensor.hpp"

#ifndef SAGDRIVE_NO_BLAS
#include <cblas.h>
#endif

namespace sagdrive {

#ifndef SAGDRIVE_NO_BLAS
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

namespace detail {

// Register-friendly loops for matrices too small to amortize a BLAS call
// (per-head attention blocks are 8..68 wide).
inline void gemm_small(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                       double alpha, const double* a, const double* b, double beta,
                       double* c) {
  if (beta == 0.0)
    for (int64_t i = 0; i < m * n; ++i) c[i] = 0.0;
  if (!trans_a && !trans_b && alpha == 1.0) {
    for (int64_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      const double* arow = a + i * k;
      for (int64_t p = 0; p < k; ++p) {
        double av = arow[p];
        const double* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  if (!trans_b) {
    // accumulate rank-1 row updates; inner loop is contiguous in B and C
    for (int64_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (int64_t p = 0; p < k; ++p) {
        double av = alpha * (trans_a ? a[p * m + i] : a[i * k + p]);
        const double* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  // op(B) = B^T with B stored [n, k]: dot products of contiguous rows
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      if (trans_a)
        for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
      else {
        const double* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      }
      crow[j] += alpha * acc;
    }
  }
}

}  // namespace detail

// C = alpha * op(A) op(B) + beta * C, row-major dense.
// BLAS threading loses on the small matrices this model produces, and
// single-threaded math keeps full-pipeline runs bit-reproducible, so the
// kernel is pinned to one thread; parallelism lives at the scenario level.
inline void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                 double alpha, const double* a, const double* b, double beta,
                 double* c) {
  if (m * n * k <= 262144) {
    detail::gemm_small(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
    return;
  }
#ifndef SAGDRIVE_NO_BLAS
  [[maybe_unused]] static const bool kPinned = [] {
    if (openblas_set_num_threads) openblas_set_num_threads(1);
    return true;
  }();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(trans_a ? m : k), b,
              static_cast<int>(trans_b ? k : n), beta, c, static_cast<int>(n));
#else
  detail::gemm_small(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
#endif
}

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* g = nullptr;
  int32_t id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& value() const;
  const Tensor& grad() const;
};

// Reverse-mode autodiff tape. Nodes are recorded in construction order,
// which is already a topological order for the backward sweep. Graphs are
// single-threaded; forward values are never mutated once recorded.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    std::function<void(Graph&)> backprop;  // accumulates into parent grads
  };

  // Leaf. Gradients accumulate here like for any node; whether it is a
  // trainable parameter is the caller's business.
  Var input(Tensor v) { return make(std::move(v), nullptr); }

  Var make(Tensor value, std::function<void(Graph&)> backprop) {
    nodes_.push_back(Node{std::move(value), {}, false, std::move(backprop)});
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  Tensor& grad_ref(int32_t id) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = Tensor::zeros(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  // Gradient of `v` after backward(); zeros if unreachable from the loss.
  const Tensor& grad_of(Var v) { return grad_ref(v.id); }

  void backward(Var loss) {
    if (loss.g != this) throw std::invalid_argument("backward: var from another graph");
    if (node(loss.id).value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  node(loss.id).value.shape_string());
    grad_ref(loss.id).data[0] = 1.0;
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = node(i);
      if (n.has_grad && n.backprop) n.backprop(*this);
    }
  }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return g->node(id).value; }
inline const Tensor& Var::grad() const { return g->node(id).grad; }

namespace detail {

inline void same_graph(Var a, Var b, const char* op) {
  if (a.g != b.g) throw std::invalid_argument(std::string(op) + ": vars from different graphs");
}

// Builds a node whose backprop closure knows its own id.
template <typename MakeBack>
inline Var op(Graph* g, Tensor value, MakeBack&& make_back) {
  Var v = g->make(std::move(value), nullptr);
  g->node(v.id).backprop = make_back(v.id);
  return v;
}

// b must equal a's shape, match a trailing suffix of it, or be scalar.
inline bool trailing_broadcast(const Tensor& a, const Tensor& b) {
  if (b.numel() == 1) return true;
  if (b.rank() > a.rank()) return false;
  for (int i = 0; i < b.rank(); ++i)
    if (b.shape[static_cast<size_t>(b.rank() - 1 - i)] !=
        a.shape[static_cast<size_t>(a.rank() - 1 - i)])
      return false;
  return true;
}

inline void require_broadcast(const Tensor& a, const Tensor& b, const char* op_name) {
  if (!trailing_broadcast(a, b))
    throw std::invalid_argument(std::string(op_name) + ": shape mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
}

inline void reduce_into_suffix(const Tensor& grad_full, Tensor& grad_b) {
  int64_t nb = grad_b.numel();
  if (nb == 1) {
    double s = 0.0;
    for (double v : grad_full.data) s += v;
    grad_b.data[0] += s;
    return;
  }
  int64_t rows = grad_full.numel() / nb;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < nb; ++j)
      grad_b.data[static_cast<size_t>(j)] += grad_full.data[static_cast<size_t>(r * nb + j)];
}

inline void axis_split(const std::vector<int64_t>& shape, int axis,
                       int64_t& outer, int64_t& mid, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  mid = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

namespace detail {

// out[r*nb + j] op= b[j] without per-element index math
template <typename F>
inline void for_each_suffix(double* out, const double* b, int64_t n, int64_t nb, F f) {
  if (nb == 1) {
    for (int64_t i = 0; i < n; ++i) f(out[i], b[0]);
    return;
  }
  for (int64_t r = 0; r < n / nb; ++r) {
    double* row = out + r * nb;
    for (int64_t j = 0; j < nb; ++j) f(row[j], b[j]);
  }
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::same_graph(a, b, "add");
  const Tensor &ta = a.value(), &tb = b.value();
  detail::require_broadcast(ta, tb, "add");
  Tensor out = ta;
  detail::for_each_suffix(out.data.data(), tb.data.data(), out.numel(), tb.numel(),
                          [](double& x, double y) { x += y; });
  int32_t ia = a.id, ib = b.id;
  return detail::op(a.g, std::move(out), [ia, ib](int32_t self) {
    return [ia, ib, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      detail::reduce_into_suffix(go, g.grad_ref(ib));
    };
  });
}

inline Var sub(Var a, Var b) {
  detail::same_graph(a, b, "sub");
  const Tensor &ta = a.value(), &tb = b.value();
  detail::require_broadcast(ta, tb, "sub");
  Tensor out = ta;
  detail::for_each_suffix(out.data.data(), tb.data.data(), out.numel(), tb.numel(),
                          [](double& x, double y) { x -= y; });
  int32_t ia = a.id, ib = b.id;
  return detail::op(a.g, std::move(out), [ia, ib](int32_t self) {
    return [ia, ib, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
      Tensor neg = go;
      for (auto& v : neg.data) v = -v;
      detail::reduce_into_suffix(neg, g.grad_ref(ib));
    };
  });
}

inline Var mul(Var a, Var b) {
  detail::same_graph(a, b, "mul");
  const Tensor &ta = a.value(), &tb = b.value();
  detail::require_broadcast(ta, tb, "mul");
  Tensor out = ta;
  detail::for_each_suffix(out.data.data(), tb.data.data(), out.numel(), tb.numel(),
                          [](double& x, double y) { x *= y; });
  int32_t ia = a.id, ib = b.id;
  return detail::op(a.g, std::move(out), [ia, ib](int32_t self) {
    return [ia, ib, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      const Tensor& va = g.node(ia).value;
      const Tensor& vb = g.node(ib).value;
      int64_t nbb = vb.numel();
      Tensor& ga = g.grad_ref(ia);
      {
        Tensor scaled = go;
        detail::for_each_suffix(scaled.data.data(), vb.data.data(), scaled.numel(), nbb,
                                [](double& x, double y) { x *= y; });
        for (int64_t i = 0; i < scaled.numel(); ++i)
          ga.data[static_cast<size_t>(i)] += scaled.data[static_cast<size_t>(i)];
      }
      Tensor gb_full = go;
      for (int64_t i = 0; i < gb_full.numel(); ++i)
        gb_full.data[static_cast<size_t>(i)] *= va.data[static_cast<size_t>(i)];
      detail::reduce_into_suffix(gb_full, g.grad_ref(ib));
    };
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data) v *= c;
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, c](int32_t self) {
    return [ia, c, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += c * go.data[static_cast<size_t>(i)];
    };
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data) v += c;
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia](int32_t self) {
    return [ia, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
    };
  });
}

inline Var neg(Var a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

// a: [..., m, k]; b: [k, n] or [..., k, n] with identical leading dims.
inline Var matmul(Var a, Var b) {
  detail::same_graph(a, b, "matmul");
  const Tensor &ta = a.value(), &tb = b.value();
  if (ta.rank() < 2 || tb.rank() < 2)
    throw std::invalid_argument("matmul: need rank >= 2, got " + ta.shape_string() +
                                " and " + tb.shape_string());
  int64_t k = ta.shape[static_cast<size_t>(ta.rank() - 1)];
  int64_t m = ta.shape[static_cast<size_t>(ta.rank() - 2)];
  if (tb.shape[static_cast<size_t>(tb.rank() - 2)] != k)
    throw std::invalid_argument("matmul: inner dim mismatch " + ta.shape_string() +
                                " vs " + tb.shape_string());
  int64_t n = tb.shape[static_cast<size_t>(tb.rank() - 1)];

  if (tb.rank() == 2) {
    int64_t rows = ta.numel() / k;  // leading dims folded into rows
    std::vector<int64_t> out_shape = ta.shape;
    out_shape.back() = n;
    Tensor out(out_shape);
    gemm(false, false, rows, n, k, 1.0, ta.data.data(), tb.data.data(), 0.0, out.data.data());
    int32_t ia = a.id, ib = b.id;
    return detail::op(a.g, std::move(out), [ia, ib, rows, n, k](int32_t self) {
      return [ia, ib, rows, n, k, self](Graph& g) {
        const Tensor& go = g.node(self).grad;
        const Tensor& va = g.node(ia).value;
        const Tensor& vb = g.node(ib).value;
        gemm(false, true, rows, k, n, 1.0, go.data.data(), vb.data.data(), 1.0,
             g.grad_ref(ia).data.data());
        gemm(true, false, k, n, rows, 1.0, va.data.data(), go.data.data(), 1.0,
             g.grad_ref(ib).data.data());
      };
    });
  }

  if (ta.rank() != tb.rank())
    throw std::invalid_argument("matmul: rank mismatch " + ta.shape_string() + " vs " +
                                tb.shape_string());
  for (int i = 0; i < ta.rank() - 2; ++i)
    if (ta.shape[static_cast<size_t>(i)] != tb.shape[static_cast<size_t>(i)])
      throw std::invalid_argument("matmul: batch dim mismatch " + ta.shape_string() +
                                  " vs " + tb.shape_string());
  int64_t batch = 1;
  for (int i = 0; i < ta.rank() - 2; ++i) batch *= ta.shape[static_cast<size_t>(i)];
  std::vector<int64_t> out_shape = ta.shape;
  out_shape.back() = n;
  Tensor out(out_shape);
  for (int64_t s = 0; s < batch; ++s)
    gemm(false, false, m, n, k, 1.0, ta.data.data() + s * m * k, tb.data.data() + s * k * n,
         0.0, out.data.data() + s * m * n);
  int32_t ia = a.id, ib = b.id;
  return detail::op(a.g, std::move(out), [ia, ib, batch, m, n, k](int32_t self) {
    return [ia, ib, batch, m, n, k, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      const Tensor& va = g.node(ia).value;
      const Tensor& vb = g.node(ib).value;
      Tensor& ga = g.grad_ref(ia);
      Tensor& gb = g.grad_ref(ib);
      for (int64_t s = 0; s < batch; ++s) {
        gemm(false, true, m, k, n, 1.0, go.data.data() + s * m * n,
             vb.data.data() + s * k * n, 1.0, ga.data.data() + s * m * k);
        gemm(true, false, k, n, m, 1.0, va.data.data() + s * m * k,
             go.data.data() + s * m * n, 1.0, gb.data.data() + s * k * n);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Var reshape(Var a, std::vector<int64_t> shape) {
  if (Tensor::numel_of(shape) != a.value().numel())
    throw std::invalid_argument("reshape: cannot view " + a.value().shape_string() +
                                " as " + Tensor::shape_str(shape));
  Tensor out(shape, a.value().data);
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia](int32_t self) {
    return [ia, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
    };
  });
}

namespace detail {

inline Tensor permute_tensor(const Tensor& t, const std::vector<int>& perm) {
  int r = t.rank();
  std::vector<int64_t> out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = t.shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  Tensor out(out_shape);
  // the two patterns attention uses constantly get tight loops
  if (r == 4 && perm == std::vector<int>{0, 2, 1, 3}) {
    int64_t b = t.shape[0], l = t.shape[1], h = t.shape[2], d = t.shape[3];
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t li = 0; li < l; ++li)
        for (int64_t hi = 0; hi < h; ++hi)
          std::copy_n(t.data.data() + ((bi * l + li) * h + hi) * d, d,
                      out.data.data() + ((bi * h + hi) * l + li) * d);
    return out;
  }
  if (r == 4 && perm == std::vector<int>{0, 1, 3, 2}) {
    int64_t b = t.shape[0] * t.shape[1], m = t.shape[2], n = t.shape[3];
    for (int64_t bi = 0; bi < b; ++bi) {
      const double* src = t.data.data() + bi * m * n;
      double* dst = out.data.data() + bi * m * n;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    return out;
  }
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1), out_stride_of_in_axis(static_cast<size_t>(r), 0);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * t.shape[static_cast<size_t>(i + 1)];
  std::vector<int64_t> out_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
  for (int i = 0; i < r; ++i) out_stride_of_in_axis[static_cast<size_t>(perm[static_cast<size_t>(i)])] = out_strides[static_cast<size_t>(i)];
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t n = t.numel();
  int64_t out_off = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    out.data[static_cast<size_t>(out_off)] = t.data[static_cast<size_t>(flat)];
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      out_off += out_stride_of_in_axis[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < t.shape[static_cast<size_t>(ax)]) break;
      out_off -= out_stride_of_in_axis[static_cast<size_t>(ax)] * t.shape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
  return out;
}

}  // namespace detail

inline Var permute(Var a, std::vector<int> perm) {
  if (static_cast<int>(perm.size()) != a.value().rank())
    throw std::invalid_argument("permute: perm rank mismatch for " + a.value().shape_string());
  Tensor out = detail::permute_tensor(a.value(), perm);
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, inv](int32_t self) {
    return [ia, inv, self](Graph& g) {
      Tensor gi = detail::permute_tensor(g.node(self).grad, inv);
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < gi.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += gi.data[static_cast<size_t>(i)];
    };
  });
}

inline Var transpose_last2(Var a) {
  int r = a.value().rank();
  if (r < 2) throw std::invalid_argument("transpose_last2: rank < 2");
  std::vector<int> perm(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) perm[static_cast<size_t>(i)] = i;
  std::swap(perm[static_cast<size_t>(r - 1)], perm[static_cast<size_t>(r - 2)]);
  return permute(a, perm);
}

inline Var slice(Var a, int axis, int64_t start, int64_t len) {
  const Tensor& ta = a.value();
  if (axis < 0 || axis >= ta.rank() || start < 0 ||
      start + len > ta.shape[static_cast<size_t>(axis)])
    throw std::invalid_argument("slice: bad range on " + ta.shape_string());
  int64_t outer, mid, inner;
  detail::axis_split(ta.shape, axis, outer, mid, inner);
  std::vector<int64_t> out_shape = ta.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(ta.data.data() + (o * mid + start) * inner, len * inner,
                out.data.data() + o * len * inner);
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, axis, start, len, outer, mid, inner](int32_t self) {
    return [ia, start, len, outer, mid, inner, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = go.data.data() + o * len * inner;
        double* dst = ga.data.data() + (o * mid + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  });
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Graph* g = parts[0].g;
  const Tensor& t0 = parts[0].value();
  int r = t0.rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: bad axis");
  int64_t mid_total = 0;
  for (const Var& p : parts) {
    detail::same_graph(parts[0], p, "concat");
    const Tensor& tp = p.value();
    if (tp.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && tp.shape[static_cast<size_t>(i)] != t0.shape[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch " + t0.shape_string() +
                                    " vs " + tp.shape_string());
    mid_total += tp.shape[static_cast<size_t>(axis)];
  }
  std::vector<int64_t> out_shape = t0.shape;
  out_shape[static_cast<size_t>(axis)] = mid_total;
  Tensor out(out_shape);
  int64_t outer, mid_out, inner;
  detail::axis_split(out_shape, axis, outer, mid_out, inner);
  std::vector<int32_t> ids;
  std::vector<int64_t> mids;
  int64_t off = 0;
  for (const Var& p : parts) {
    const Tensor& tp = p.value();
    int64_t mid_p = tp.shape[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(tp.data.data() + o * mid_p * inner, mid_p * inner,
                  out.data.data() + (o * mid_out + off) * inner);
    ids.push_back(p.id);
    mids.push_back(mid_p);
    off += mid_p;
  }
  return detail::op(g, std::move(out), [ids, mids, outer, mid_out, inner](int32_t self) {
    return [ids, mids, outer, mid_out, inner, self](Graph& g2) {
      const Tensor& go = g2.node(self).grad;
      int64_t off2 = 0;
      for (size_t p = 0; p < ids.size(); ++p) {
        Tensor& gp = g2.grad_ref(ids[p]);
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = go.data.data() + (o * mid_out + off2) * inner;
          double* dst = gp.data.data() + o * mids[p] * inner;
          for (int64_t i = 0; i < mids[p] * inner; ++i) dst[i] += src[i];
        }
        off2 += mids[p];
      }
    };
  });
}

// [B, D] -> [B, n, D] by repeating the middle axis; used to broadcast a
// per-sample vector onto every query slot.
inline Var repeat_middle(Var a, int64_t n) {
  const Tensor& ta = a.value();
  if (ta.rank() != 2) throw std::invalid_argument("repeat_middle: need [B,D], got " + ta.shape_string());
  int64_t b = ta.shape[0], d = ta.shape[1];
  Tensor out({b, n, d});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < n; ++j)
      std::copy_n(ta.data.data() + i * d, d, out.data.data() + (i * n + j) * d);
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, b, n, d](int32_t self) {
    return [ia, b, n, d, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double* src = go.data.data() + (i * n + j) * d;
          double* dst = ga.data.data() + i * d;
          for (int64_t x = 0; x < d; ++x) dst[x] += src[x];
        }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  int32_t ia = a.id;
  return detail::op(a.g, Tensor::scalar(s), [ia](int32_t self) {
    return [ia, self](Graph& g) {
      double go = g.node(self).grad.data[0];
      Tensor& ga = g.grad_ref(ia);
      for (auto& v : ga.data) v += go;
    };
  });
}

inline Var mean_all(Var a) {
  int64_t n = a.value().numel();
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

inline Var sum_axis(Var a, int axis) {
  const Tensor& ta = a.value();
  if (axis < 0 || axis >= ta.rank()) throw std::invalid_argument("sum_axis: bad axis");
  int64_t outer, mid, inner;
  detail::axis_split(ta.shape, axis, outer, mid, inner);
  std::vector<int64_t> out_shape;
  for (int i = 0; i < ta.rank(); ++i)
    if (i != axis) out_shape.push_back(ta.shape[static_cast<size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m)
      for (int64_t i = 0; i < inner; ++i)
        out.data[static_cast<size_t>(o * inner + i)] += ta.data[static_cast<size_t>((o * mid + m) * inner + i)];
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, outer, mid, inner](int32_t self) {
    return [ia, outer, mid, inner, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m)
          for (int64_t i = 0; i < inner; ++i)
            ga.data[static_cast<size_t>((o * mid + m) * inner + i)] += go.data[static_cast<size_t>(o * inner + i)];
    };
  });
}

inline Var mean_axis(Var a, int axis) {
  int64_t n = a.value().shape[static_cast<size_t>(axis)];
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Nonlinearities and pointwise math
// ---------------------------------------------------------------------------

namespace detail {

// One forward sweep computes both f(x) and f'(x); the cached derivative
// makes backward a plain multiply, which matters for transcendental ops.
template <typename FwdDeriv>
inline Var pointwise(Var a, FwdDeriv f) {
  const Tensor& ta = a.value();
  Tensor out(ta.shape);
  Tensor deriv(ta.shape);
  for (int64_t i = 0; i < ta.numel(); ++i)
    out.data[static_cast<size_t>(i)] =
        f(ta.data[static_cast<size_t>(i)], deriv.data[static_cast<size_t>(i)]);
  int32_t ia = a.id;
  return op(a.g, std::move(out), [ia, deriv = std::move(deriv)](int32_t self) {
    return [ia, deriv, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] +=
            go.data[static_cast<size_t>(i)] * deriv.data[static_cast<size_t>(i)];
    };
  });
}

inline double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// log(1 + e^x) without overflow.
inline double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

inline Var tanh_op(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    double t = std::tanh(x);
    d = 1.0 - t * t;
    return t;
  });
}

inline Var sigmoid(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    double s = detail::sigmoid_scalar(x);
    d = s * (1.0 - s);
    return s;
  });
}

// Stable log sigmoid: -softplus(-x).
inline Var logsigmoid(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    double y = -detail::softplus_scalar(-x);
    d = 1.0 - std::exp(y);  // 1 - sigmoid(x)
    return y;
  });
}

inline Var softplus(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    double y = detail::softplus_scalar(x);
    d = 1.0 - std::exp(-y);  // sigmoid(x)
    return y;
  });
}

inline Var log_op(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    d = 1.0 / x;
    return std::log(x);
  });
}

inline Var exp_op(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    double y = std::exp(x);
    d = y;
    return y;
  });
}

inline Var abs_op(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    d = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    return std::abs(x);
  });
}

inline Var square(Var a) {
  return detail::pointwise(a, [](double x, double& d) {
    d = 2.0 * x;
    return x * x;
  });
}

// tanh approximation of GELU.
inline Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return detail::pointwise(a, [](double x, double& d) {
    double u = kC * (x + kA * x * x * x);
    double t = std::tanh(u);
    double sech2 = 1.0 - t * t;
    d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * kC * (1.0 + 3.0 * kA * x * x);
    return 0.5 * x * (1.0 + t);
  });
}

// ---------------------------------------------------------------------------
// Softmax family (over the last axis)
// ---------------------------------------------------------------------------

inline Var softmax_last(Var a) {
  const Tensor& ta = a.value();
  int64_t c = ta.last_dim();
  int64_t rows = ta.numel() / c;
  Tensor out = ta;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int64_t j = 0; j < c; ++j) row[j] /= s;
  }
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, rows, c](int32_t self) {
    return [ia, rows, c, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      const Tensor& y = g.node(self).value;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y.data.data() + r * c;
        const double* gr = go.data.data() + r * c;
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += yr[j] * gr[j];
        double* dst = ga.data.data() + r * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += yr[j] * (gr[j] - dot);
      }
    };
  });
}

inline Var log_softmax_last(Var a) {
  const Tensor& ta = a.value();
  int64_t c = ta.last_dim();
  int64_t rows = ta.numel() / c;
  Tensor out = ta;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    double lse = mx + std::log(s);
    for (int64_t j = 0; j < c; ++j) row[j] -= lse;
  }
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, rows, c](int32_t self) {
    return [ia, rows, c, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      const Tensor& y = g.node(self).value;  // log-probs
      Tensor& ga = g.grad_ref(ia);
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y.data.data() + r * c;
        const double* gr = go.data.data() + r * c;
        double gsum = 0.0;
        for (int64_t j = 0; j < c; ++j) gsum += gr[j];
        double* dst = ga.data.data() + r * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += gr[j] - std::exp(yr[j]) * gsum;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Layer normalization (last axis), epsilon 1e-5
// ---------------------------------------------------------------------------

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::same_graph(x, gamma, "layer_norm");
  detail::same_graph(x, beta, "layer_norm");
  const Tensor& tx = x.value();
  int64_t d = tx.last_dim();
  if (gamma.value().numel() != d || beta.value().numel() != d)
    throw std::invalid_argument("layer_norm: affine params must be length " + std::to_string(d));
  int64_t rows = tx.numel() / d;
  Tensor out(tx.shape);
  Tensor xhat(tx.shape);
  std::vector<double> istd(static_cast<size_t>(rows));
  const double* gam = gamma.value().data.data();
  const double* bet = beta.value().data.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = tx.data.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    istd[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * is;
      xhat.data[static_cast<size_t>(r * d + j)] = xh;
      out.data[static_cast<size_t>(r * d + j)] = xh * gam[j] + bet[j];
    }
  }
  int32_t ix = x.id, ig = gamma.id, ib = beta.id;
  return detail::op(x.g, std::move(out), [ix, ig, ib, rows, d, xhat, istd](int32_t self) {
    return [ix, ig, ib, rows, d, xhat, istd, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      const Tensor& vgam = g.node(ig).value;
      Tensor& gx = g.grad_ref(ix);
      Tensor& ggam = g.grad_ref(ig);
      Tensor& gbet = g.grad_ref(ib);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = go.data.data() + r * d;
        const double* xh = xhat.data.data() + r * d;
        double is = istd[static_cast<size_t>(r)];
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double dyg = gr[j] * vgam.data[static_cast<size_t>(j)];
          m1 += dyg;
          m2 += dyg * xh[j];
          ggam.data[static_cast<size_t>(j)] += gr[j] * xh[j];
          gbet.data[static_cast<size_t>(j)] += gr[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        double* dst = gx.data.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
          double dyg = gr[j] * vgam.data[static_cast<size_t>(j)];
          dst[j] += is * (dyg - m1 - xh[j] * m2);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Attention masking: additive large-negative constant on disallowed logits
// ---------------------------------------------------------------------------

// allow: tensor of 0/1 matching a trailing suffix of the logits shape.
// Disallowed entries receive `neg` additively so gradient flow through them
// is negligible after softmax.
inline Var masked_fill(Var logits, const Tensor& allow, double neg = -1e9) {
  const Tensor& tl = logits.value();
  detail::require_broadcast(tl, allow, "masked_fill");
  Tensor out = tl;
  detail::for_each_suffix(out.data.data(), allow.data.data(), out.numel(), allow.numel(),
                          [neg](double& x, double m) { if (m == 0.0) x += neg; });
  int32_t ia = logits.id;
  return detail::op(logits.g, std::move(out), [ia](int32_t self) {
    return [ia, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
    };
  });
}

// ---------------------------------------------------------------------------
// Lookup / gather
// ---------------------------------------------------------------------------

inline Var embedding(Var table, const std::vector<int64_t>& ids) {
  const Tensor& tt = table.value();
  if (tt.rank() != 2) throw std::invalid_argument("embedding: table must be [V,D], got " + tt.shape_string());
  int64_t v = tt.shape[0], d = tt.shape[1];
  for (int64_t id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range [0," +
                                  std::to_string(v) + ")");
  Tensor out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tt.data.data() + ids[i] * d, d, out.data.data() + static_cast<int64_t>(i) * d);
  int32_t it = table.id;
  return detail::op(table.g, std::move(out), [it, ids, d](int32_t self) {
    return [it, ids, d, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& gt = g.grad_ref(it);
      for (size_t i = 0; i < ids.size(); ++i) {
        const double* src = go.data.data() + static_cast<int64_t>(i) * d;
        double* dst = gt.data.data() + ids[i] * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  });
}

// Select rows of a [N,D] tensor (or elements of a [N] tensor).
inline Var gather_rows(Var a, const std::vector<int64_t>& idx) {
  const Tensor& ta = a.value();
  int64_t n = ta.shape[0];
  int64_t d = ta.rank() == 1 ? 1 : ta.numel() / n;
  for (int64_t i : idx)
    if (i < 0 || i >= n) throw std::invalid_argument("gather_rows: index out of range");
  std::vector<int64_t> out_shape = ta.shape;
  out_shape[0] = static_cast<int64_t>(idx.size());
  Tensor out(out_shape);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(ta.data.data() + idx[i] * d, d, out.data.data() + static_cast<int64_t>(i) * d);
  int32_t ia = a.id;
  return detail::op(a.g, std::move(out), [ia, idx, d](int32_t self) {
    return [ia, idx, d, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (size_t i = 0; i < idx.size(); ++i) {
        const double* src = go.data.data() + static_cast<int64_t>(i) * d;
        double* dst = ga.data.data() + idx[i] * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Classification losses (numerically stable forms)
// ---------------------------------------------------------------------------

// Elementwise binary cross-entropy on logits against 0/1 targets.
inline Var bce_logits(Var logits, const Tensor& targets) {
  const Tensor& tx = logits.value();
  check_same_shape(tx, targets, "bce_logits");
  Tensor out(tx.shape);
  Tensor deriv(tx.shape);  // sigmoid(x) - z
  for (int64_t i = 0; i < tx.numel(); ++i) {
    double x = tx.data[static_cast<size_t>(i)];
    double z = targets.data[static_cast<size_t>(i)];
    out.data[static_cast<size_t>(i)] = std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x)));
    deriv.data[static_cast<size_t>(i)] = detail::sigmoid_scalar(x) - z;
  }
  int32_t ia = logits.id;
  return detail::op(logits.g, std::move(out), [ia, deriv = std::move(deriv)](int32_t self) {
    return [ia, deriv, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga.data[static_cast<size_t>(i)] +=
            go.data[static_cast<size_t>(i)] * deriv.data[static_cast<size_t>(i)];
    };
  });
}

// Per-row cross-entropy of [N,C] logits against integer class targets -> [N].
inline Var ce_logits(Var logits, const std::vector<int64_t>& target) {
  const Tensor& tx = logits.value();
  if (tx.rank() != 2) throw std::invalid_argument("ce_logits: need [N,C], got " + tx.shape_string());
  int64_t n = tx.shape[0], c = tx.shape[1];
  if (static_cast<int64_t>(target.size()) != n)
    throw std::invalid_argument("ce_logits: target count mismatch");
  Tensor out({n});
  for (int64_t r = 0; r < n; ++r) {
    const double* row = tx.data.data() + r * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    out.data[static_cast<size_t>(r)] = mx + std::log(s) - row[target[static_cast<size_t>(r)]];
  }
  int32_t ia = logits.id;
  return detail::op(logits.g, std::move(out), [ia, target, n, c](int32_t self) {
    return [ia, target, n, c, self](Graph& g) {
      const Tensor& go = g.node(self).grad;
      const Tensor& x = g.node(ia).value;
      Tensor& ga = g.grad_ref(ia);
      for (int64_t r = 0; r < n; ++r) {
        const double* row = x.data.data() + r * c;
        double mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        double gr = go.data[static_cast<size_t>(r)];
        double* dst = ga.data.data() + r * c;
        for (int64_t j = 0; j < c; ++j) {
          double p = std::exp(row[j] - mx) / s;
          dst[j] += gr * (p - (j == target[static_cast<size_t>(r)] ? 1.0 : 0.0));
        }
      }
    };
  });
}

// L1 distance to a constant target, summed over all entries.
inline Var l1_to(Var a, const Tensor& target) {
  check_same_shape(a.value(), target, "l1_to");
  Var t = a.g->input(target);
  return sum_all(abs_op(sub(a, t)));
}

}  // namespace sagdrive
