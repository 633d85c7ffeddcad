// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode autodiff on a replay tape. The op set is
// exactly what an encoder-decoder Transformer needs; attention reshapes are
// explicit ops so every tape node has a hand-checkable backward rule.
//
// Sharing semantics: a Tensor is a handle onto shared storage. Using the same
// handle at k tape sites makes its grad buffer receive the sum of k
// contributions, because every backward rule accumulates with +=. That is the
// whole mechanism behind tied parameter blocks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "shareformer/rng.hpp"

namespace shareformer {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // non-null iff this tensor takes gradient

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(t.shape)), T(0));
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  std::int64_t numel() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool defined() const { return static_cast<bool>(data); }
  bool requires_grad() const { return static_cast<bool>(grad); }

  T* v() { return data->data(); }
  const T* v() const { return data->data(); }
  T* g() { return grad->data(); }
  const T* g() const { return grad->data(); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape));
    return (*data)[0];
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Same storage, no gradient participation.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  // Deep copy of values (fresh storage).
  Tensor clone_values(bool requires_grad = false) const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }
};

namespace detail {

// c[m,n] (+)= a[m,k] . b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      if (aip == T(0)) continue;
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c[m,n] (+)= a[m,k] . b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = accumulate ? crow[j] : T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

// c[k,n] (+)= a[m,k]^T . b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, T(0));
  for (std::int64_t p = 0; p < m; ++p) {
    const T* arow = a + p * k;
    const T* brow = b + p * n;
    for (std::int64_t i = 0; i < k; ++i) {
      const T api = arow[i];
      if (api == T(0)) continue;
      T* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

}  // namespace detail

// Records backward closures during forward execution; backward() replays them
// in reverse. One tape per training step, owned by one thread.
template <typename T>
class Tape {
 public:
  std::size_t num_nodes() const { return back_.size(); }
  void clear() { back_.clear(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss.shape));
    }
    if (!loss.requires_grad()) return;  // nothing reachable takes gradient
    (*loss.grad)[0] += T(1);
    for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)();
  }

  // ---- binary / elementwise ----

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = make_out(a.shape, a.requires_grad() || b.requires_grad());
    const T* av = a.v();
    const T* bv = b.v();
    T* ov = out.v();
    for (std::int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
      record([a, b, out]() {
        const T* og = out.g();
        const std::int64_t n = out.numel();
        if (a.grad) {
          T* ag = a.g();
          for (std::int64_t i = 0; i < n; ++i) ag[i] += og[i];
        }
        if (b.grad) {
          T* bg = b.g();
          for (std::int64_t i = 0; i < n; ++i) bg[i] += og[i];
        }
      });
    }
    return out;
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = make_out(a.shape, a.requires_grad() || b.requires_grad());
    const T* av = a.v();
    const T* bv = b.v();
    T* ov = out.v();
    for (std::int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
      record([a, b, out]() {
        const T* og = out.g();
        const std::int64_t n = out.numel();
        if (a.grad) {
          T* ag = a.g();
          const T* bv2 = b.v();
          for (std::int64_t i = 0; i < n; ++i) ag[i] += og[i] * bv2[i];
        }
        if (b.grad) {
          T* bg = b.g();
          const T* av2 = a.v();
          for (std::int64_t i = 0; i < n; ++i) bg[i] += og[i] * av2[i];
        }
      });
    }
    return out;
  }

  Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = make_out(a.shape, a.requires_grad());
    const T* av = a.v();
    T* ov = out.v();
    for (std::int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
      record([a, out, c]() {
        T* ag = a.g();
        const T* og = out.g();
        for (std::int64_t i = 0, n = out.numel(); i < n; ++i) ag[i] += og[i] * c;
      });
    }
    return out;
  }

  // x[r,d] + b[d], broadcast over rows
  Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    const auto [rows, d] = rows_cols(x, "add_rowvec");
    if (b.numel() != d) {
      throw std::invalid_argument("add_rowvec: vector " + shape_str(b.shape) +
                                  " does not match row width " + std::to_string(d));
    }
    Tensor<T> out = make_out(x.shape, x.requires_grad() || b.requires_grad());
    const T* xv = x.v();
    const T* bv = b.v();
    T* ov = out.v();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] + bv[j];
    if (out.requires_grad()) {
      record([x, b, out, rows = rows, d = d]() {
        const T* og = out.g();
        if (x.grad) {
          T* xg = x.g();
          for (std::int64_t i = 0, n = rows * d; i < n; ++i) xg[i] += og[i];
        }
        if (b.grad) {
          T* bg = b.g();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) bg[j] += og[r * d + j];
        }
      });
    }
    return out;
  }

  // x[r,d] * w[d], broadcast over rows (residual-branch scaling)
  Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& w) {
    const auto [rows, d] = rows_cols(x, "mul_rowvec");
    if (w.numel() != d) {
      throw std::invalid_argument("mul_rowvec: vector " + shape_str(w.shape) +
                                  " does not match row width " + std::to_string(d));
    }
    Tensor<T> out = make_out(x.shape, x.requires_grad() || w.requires_grad());
    const T* xv = x.v();
    const T* wv = w.v();
    T* ov = out.v();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] * wv[j];
    if (out.requires_grad()) {
      record([x, w, out, rows = rows, d = d]() {
        const T* og = out.g();
        const T* xv2 = x.v();
        const T* wv2 = w.v();
        if (x.grad) {
          T* xg = x.g();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) xg[r * d + j] += og[r * d + j] * wv2[j];
        }
        if (w.grad) {
          T* wg = w.g();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) wg[j] += og[r * d + j] * xv2[r * d + j];
        }
      });
    }
    return out;
  }

  Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = make_out(x.shape, x.requires_grad());
    const T* xv = x.v();
    T* ov = out.v();
    for (std::int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (out.requires_grad()) {
      record([x, out]() {
        T* xg = x.g();
        const T* xv2 = x.v();
        const T* og = out.g();
        for (std::int64_t i = 0, n = out.numel(); i < n; ++i)
          if (xv2[i] > T(0)) xg[i] += og[i];
      });
    }
    return out;
  }

  // ---- matrix products ----

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape) + " x " +
                                  shape_str(b.shape));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = make_out({m, n}, a.requires_grad() || b.requires_grad());
    detail::gemm_nn(a.v(), b.v(), out.v(), m, k, n, false);
    if (out.requires_grad()) {
      record([a, b, out, m, k, n]() {
        // dA += dC . B^T ; dB += A^T . dC
        if (a.grad) detail::gemm_nt(out.g(), b.v(), a.g(), m, n, k, true);
        if (b.grad) detail::gemm_tn(a.v(), out.g(), b.g(), m, k, n, true);
      });
    }
    return out;
  }

  // a[m,k] . b[n,k]^T -> [m,n]; lets a weight table be used transposed in place.
  Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
      throw std::invalid_argument("matmul_nt shape mismatch: " + shape_str(a.shape) + " x " +
                                  shape_str(b.shape) + "^T");
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out = make_out({m, n}, a.requires_grad() || b.requires_grad());
    detail::gemm_nt(a.v(), b.v(), out.v(), m, k, n, false);
    if (out.requires_grad()) {
      record([a, b, out, m, k, n]() {
        // C = A.B^T: dA += dC . B ; dB += dC^T . A
        if (a.grad) detail::gemm_nn(out.g(), b.v(), a.g(), m, n, k, true);
        if (b.grad) detail::gemm_tn(out.g(), a.v(), b.g(), m, n, k, true);
      });
    }
    return out;
  }

  // batched: a[B,m,k] . b[B,k,n]
  Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
      throw std::invalid_argument("bmm shape mismatch: " + shape_str(a.shape) + " x " +
                                  shape_str(b.shape));
    }
    const std::int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<T> out = make_out({bs, m, n}, a.requires_grad() || b.requires_grad());
    for (std::int64_t i = 0; i < bs; ++i)
      detail::gemm_nn(a.v() + i * m * k, b.v() + i * k * n, out.v() + i * m * n, m, k, n, false);
    if (out.requires_grad()) {
      record([a, b, out, bs, m, k, n]() {
        for (std::int64_t i = 0; i < bs; ++i) {
          if (a.grad)
            detail::gemm_nt(out.g() + i * m * n, b.v() + i * k * n, a.g() + i * m * k, m, n, k, true);
          if (b.grad)
            detail::gemm_tn(a.v() + i * m * k, out.g() + i * m * n, b.g() + i * k * n, m, k, n, true);
        }
      });
    }
    return out;
  }

  // batched: a[B,m,k] . b[B,n,k]^T -> [B,m,n] (attention scores)
  Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
      throw std::invalid_argument("bmm_nt shape mismatch: " + shape_str(a.shape) + " x " +
                                  shape_str(b.shape) + "^T");
    }
    const std::int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor<T> out = make_out({bs, m, n}, a.requires_grad() || b.requires_grad());
    for (std::int64_t i = 0; i < bs; ++i)
      detail::gemm_nt(a.v() + i * m * k, b.v() + i * n * k, out.v() + i * m * n, m, k, n, false);
    if (out.requires_grad()) {
      record([a, b, out, bs, m, k, n]() {
        for (std::int64_t i = 0; i < bs; ++i) {
          if (a.grad)
            detail::gemm_nn(out.g() + i * m * n, b.v() + i * n * k, a.g() + i * m * k, m, n, k, true);
          if (b.grad)
            detail::gemm_tn(out.g() + i * m * n, a.v() + i * m * k, b.g() + i * n * k, m, n, k, true);
        }
      });
    }
    return out;
  }

  // ---- attention plumbing ----

  // [B*S, d] -> [B*h, S, d/h]
  Tensor<T> split_heads(const Tensor<T>& x, std::int64_t batch, std::int64_t seq, std::int64_t heads) {
    const auto [rows, d] = rows_cols(x, "split_heads");
    if (rows != batch * seq || d % heads != 0) {
      throw std::invalid_argument("split_heads: bad geometry for " + shape_str(x.shape));
    }
    const std::int64_t hd = d / heads;
    Tensor<T> out = make_out({batch * heads, seq, hd}, x.requires_grad());
    const T* xv = x.v();
    T* ov = out.v();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t s = 0; s < seq; ++s) {
          const T* src = xv + (b * seq + s) * d + h * hd;
          T* dst = ov + ((b * heads + h) * seq + s) * hd;
          std::copy(src, src + hd, dst);
        }
    if (out.requires_grad()) {
      record([x, out, batch, seq, heads, hd, d = d]() {
        T* xg = x.g();
        const T* og = out.g();
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t h = 0; h < heads; ++h)
            for (std::int64_t s = 0; s < seq; ++s) {
              const T* src = og + ((b * heads + h) * seq + s) * hd;
              T* dst = xg + (b * seq + s) * d + h * hd;
              for (std::int64_t t = 0; t < hd; ++t) dst[t] += src[t];
            }
      });
    }
    return out;
  }

  // [B*h, S, d/h] -> [B*S, d]
  Tensor<T> merge_heads(const Tensor<T>& x, std::int64_t batch, std::int64_t seq, std::int64_t heads) {
    if (x.rank() != 3 || x.dim(0) != batch * heads || x.dim(1) != seq) {
      throw std::invalid_argument("merge_heads: bad geometry for " + shape_str(x.shape));
    }
    const std::int64_t hd = x.dim(2);
    const std::int64_t d = heads * hd;
    Tensor<T> out = make_out({batch * seq, d}, x.requires_grad());
    const T* xv = x.v();
    T* ov = out.v();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t s = 0; s < seq; ++s) {
          const T* src = xv + ((b * heads + h) * seq + s) * hd;
          T* dst = ov + (b * seq + s) * d + h * hd;
          std::copy(src, src + hd, dst);
        }
    if (out.requires_grad()) {
      record([x, out, batch, seq, heads, hd, d]() {
        T* xg = x.g();
        const T* og = out.g();
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t h = 0; h < heads; ++h)
            for (std::int64_t s = 0; s < seq; ++s) {
              const T* src = og + (b * seq + s) * d + h * hd;
              T* dst = xg + ((b * heads + h) * seq + s) * hd;
              for (std::int64_t t = 0; t < hd; ++t) dst[t] += src[t];
            }
      });
    }
    return out;
  }

  // scores[B*h, q, k] with mask[B*q*k] (1 = blocked); adds a large negative so
  // softmax sends blocked keys to exactly zero weight.
  Tensor<T> mask_scores(const Tensor<T>& scores, std::shared_ptr<const std::vector<std::uint8_t>> mask,
                        std::int64_t heads) {
    if (scores.rank() != 3 || scores.dim(0) % heads != 0) {
      throw std::invalid_argument("mask_scores: bad geometry for " + shape_str(scores.shape));
    }
    const std::int64_t batch = scores.dim(0) / heads;
    const std::int64_t q = scores.dim(1), k = scores.dim(2);
    if (static_cast<std::int64_t>(mask->size()) != batch * q * k) {
      throw std::invalid_argument("mask_scores: mask size does not match scores");
    }
    constexpr T kNeg = T(-1e9);
    Tensor<T> out = make_out(scores.shape, scores.requires_grad());
    const T* sv = scores.v();
    T* ov = out.v();
    const std::uint8_t* mv = mask->data();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t base = (b * heads + h) * q * k;
        const std::uint8_t* mrow = mv + b * q * k;
        for (std::int64_t i = 0; i < q * k; ++i) ov[base + i] = mrow[i] ? sv[base + i] + kNeg : sv[base + i];
      }
    if (out.requires_grad()) {
      record([scores, out]() {
        T* sg = scores.g();
        const T* og = out.g();
        for (std::int64_t i = 0, n = out.numel(); i < n; ++i) sg[i] += og[i];
      });
    }
    return out;
  }

  // ---- normalization / nonlinearity over rows ----

  // softmax over the last axis, max-subtracted
  Tensor<T> softmax_rows(const Tensor<T>& x) {
    const auto [rows, d] = rows_cols(x, "softmax_rows");
    Tensor<T> out = make_out(x.shape, x.requires_grad());
    const T* xv = x.v();
    T* ov = out.v();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = xv + r * d;
      T* orow = ov + r * d;
      T mx = xr[0];
      for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
      double sum = 0;
      for (std::int64_t j = 0; j < d; ++j) {
        orow[j] = std::exp(xr[j] - mx);
        sum += static_cast<double>(orow[j]);
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (std::int64_t j = 0; j < d; ++j) orow[j] *= inv;
    }
    if (out.requires_grad()) {
      record([x, out, rows = rows, d = d]() {
        T* xg = x.g();
        const T* ov2 = out.v();
        const T* og = out.g();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* y = ov2 + r * d;
          const T* dy = og + r * d;
          double dot = 0;
          for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
          const T dots = static_cast<T>(dot);
          T* dx = xg + r * d;
          for (std::int64_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dots);
        }
      });
    }
    return out;
  }

  // per-row standardization over the feature axis, then affine transform
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    const auto [rows, d] = rows_cols(x, "layer_norm");
    if (gain.numel() != d || bias.numel() != d) {
      throw std::invalid_argument("layer_norm: gain/bias width does not match " + shape_str(x.shape));
    }
    Tensor<T> out = make_out(x.shape, x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * d));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* xv = x.v();
    const T* gv = gain.v();
    const T* bv = bias.v();
    T* ov = out.v();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = xv + r * d;
      double mean = 0;
      for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
      mean /= static_cast<double>(d);
      double var = 0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double c = xr[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      (*inv_std)[static_cast<std::size_t>(r)] = inv;
      T* xh = xhat->data() + r * d;
      T* orow = ov + r * d;
      for (std::int64_t j = 0; j < d; ++j) {
        xh[j] = static_cast<T>((xr[j] - mean) * inv);
        orow[j] = gv[j] * xh[j] + bv[j];
      }
    }
    if (out.requires_grad()) {
      record([x, gain, bias, out, xhat, inv_std, rows = rows, d = d]() {
        const T* og = out.g();
        const T* gv2 = gain.v();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* dy = og + r * d;
          const T* xh = xhat->data() + r * d;
          if (x.grad) {
            // dL/dx = inv * (g.dy - mean(g.dy) - xhat * mean(g.dy.xhat))
            double m1 = 0, m2 = 0;
            for (std::int64_t j = 0; j < d; ++j) {
              const double gdy = static_cast<double>(gv2[j]) * dy[j];
              m1 += gdy;
              m2 += gdy * xh[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            const T inv = (*inv_std)[static_cast<std::size_t>(r)];
            T* dx = x.g() + r * d;
            for (std::int64_t j = 0; j < d; ++j) {
              dx[j] += inv * static_cast<T>(static_cast<double>(gv2[j]) * dy[j] - m1 -
                                            static_cast<double>(xh[j]) * m2);
            }
          }
          if (gain.grad) {
            T* dg = gain.g();
            for (std::int64_t j = 0; j < d; ++j) dg[j] += dy[j] * xh[j];
          }
          if (bias.grad) {
            T* db = bias.g();
            for (std::int64_t j = 0; j < d; ++j) db[j] += dy[j];
          }
        }
      });
    }
    return out;
  }

  // ---- embedding / loss / reductions ----

  Tensor<T> embedding(const std::vector<int>& ids, const Tensor<T>& table) {
    if (table.rank() != 2) throw std::invalid_argument("embedding table must be 2-D");
    const std::int64_t vocab = table.dim(0), d = table.dim(1);
    for (int id : ids) {
      if (id < 0 || id >= vocab) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocab of " +
                                std::to_string(vocab));
      }
    }
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    Tensor<T> out = make_out({n, d}, table.requires_grad());
    const T* tv = table.v();
    T* ov = out.v();
    for (std::int64_t i = 0; i < n; ++i)
      std::copy(tv + ids[static_cast<std::size_t>(i)] * d, tv + (ids[static_cast<std::size_t>(i)] + 1) * d,
                ov + i * d);
    if (out.requires_grad()) {
      record([ids, table, out, n, d]() {
        T* tg = table.g();
        const T* og = out.g();
        for (std::int64_t i = 0; i < n; ++i) {
          T* dst = tg + ids[static_cast<std::size_t>(i)] * d;
          const T* src = og + i * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
    }
    return out;
  }

  // Inverted dropout with a stateless mask stream; rate 0 is the identity.
  Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t key) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
    Tensor<T> out = make_out(x.shape, x.requires_grad());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(x.numel()));
    const T* xv = x.v();
    T* ov = out.v();
    for (std::int64_t i = 0, n = x.numel(); i < n; ++i) {
      const bool keep = uniform_at(key, static_cast<std::uint64_t>(i)) >= rate;
      (*mask)[static_cast<std::size_t>(i)] = keep;
      ov[i] = keep ? xv[i] * keep_scale : T(0);
    }
    if (out.requires_grad()) {
      record([x, out, mask, keep_scale]() {
        T* xg = x.g();
        const T* og = out.g();
        for (std::int64_t i = 0, n = out.numel(); i < n; ++i)
          if ((*mask)[static_cast<std::size_t>(i)]) xg[i] += og[i] * keep_scale;
      });
    }
    return out;
  }

  // Mean over non-pad positions of the label-smoothed NLL. The smoothed target
  // distribution is (1-eps)*onehot + eps/V uniform over the full vocabulary.
  Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, const std::vector<int>& targets,
                                         int pad_id, double eps_smooth) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy expects 2-D logits");
    if (eps_smooth < 0.0 || eps_smooth >= 1.0) {
      throw std::invalid_argument("label smoothing must lie in [0, 1)");
    }
    const std::int64_t n = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != n) {
      throw std::invalid_argument("cross_entropy: targets length does not match logits rows");
    }
    std::int64_t live = 0;
    for (int t : targets) {
      if (t == pad_id) continue;
      if (t < 0 || t >= vocab) {
        throw std::out_of_range("target id " + std::to_string(t) + " outside vocab of " +
                                std::to_string(vocab));
      }
      ++live;
    }
    Tensor<T> out = make_out({1}, logits.requires_grad());
    if (live == 0) {
      out.v()[0] = T(0);
      return out;  // pad-only batch contributes nothing, gradient stays zero
    }
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * vocab), T(0));
    const T* lv = logits.v();
    double total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (targets[static_cast<std::size_t>(i)] == pad_id) continue;
      const T* row = lv + i * vocab;
      T mx = row[0];
      for (std::int64_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
      double sum = 0, rowsum = 0;
      T* prow = probs->data() + i * vocab;
      for (std::int64_t j = 0; j < vocab; ++j) {
        const double e = std::exp(static_cast<double>(row[j] - mx));
        prow[j] = static_cast<T>(e);
        sum += e;
        rowsum += static_cast<double>(row[j]);
      }
      const double log_z = static_cast<double>(mx) + std::log(sum);
      const T inv = static_cast<T>(1.0 / sum);
      for (std::int64_t j = 0; j < vocab; ++j) prow[j] *= inv;
      const double gold = static_cast<double>(row[targets[static_cast<std::size_t>(i)]]);
      total += log_z - (1.0 - eps_smooth) * gold - (eps_smooth / static_cast<double>(vocab)) * rowsum;
    }
    out.v()[0] = static_cast<T>(total / static_cast<double>(live));
    if (out.requires_grad()) {
      record([logits, out, probs, targets, pad_id, eps_smooth, n, vocab, live]() {
        const T gscale = out.g()[0] / static_cast<T>(live);
        const T uniform = static_cast<T>(eps_smooth / static_cast<double>(vocab));
        const T gold_w = static_cast<T>(1.0 - eps_smooth);
        T* lg = logits.g();
        for (std::int64_t i = 0; i < n; ++i) {
          const int t = targets[static_cast<std::size_t>(i)];
          if (t == pad_id) continue;
          const T* prow = probs->data() + i * vocab;
          T* grow = lg + i * vocab;
          for (std::int64_t j = 0; j < vocab; ++j) grow[j] += gscale * (prow[j] - uniform);
          grow[t] -= gscale * gold_w;
        }
      });
    }
    return out;
  }

  Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = make_out({1}, x.requires_grad());
    double s = 0;
    const T* xv = x.v();
    for (std::int64_t i = 0, n = x.numel(); i < n; ++i) s += xv[i];
    out.v()[0] = static_cast<T>(s);
    if (out.requires_grad()) {
      record([x, out]() {
        const T g = out.g()[0];
        T* xg = x.g();
        for (std::int64_t i = 0, n = x.numel(); i < n; ++i) xg[i] += g;
      });
    }
    return out;
  }

  Tensor<T> mean_all(const Tensor<T>& x) {
    Tensor<T> s = sum_all(x);
    return scale(s, static_cast<T>(1.0 / static_cast<double>(x.numel())));
  }

 private:
  std::vector<std::function<void()>> back_;

  template <typename F>
  void record(F&& fn) {
    back_.emplace_back(std::forward<F>(fn));
  }

  Tensor<T> make_out(Shape shape, bool requires_grad) {
    return Tensor<T>::zeros(std::move(shape), requires_grad);
  }

  static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape != b.shape) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                  " vs " + shape_str(b.shape));
    }
  }

  // view any tensor as [rows, last-dim]
  static std::pair<std::int64_t, std::int64_t> rows_cols(const Tensor<T>& x, const char* op) {
    if (x.rank() < 1) throw std::invalid_argument(std::string(op) + ": rank-0 tensor");
    const std::int64_t d = x.dim(x.rank() - 1);
    if (d < 1) throw std::invalid_argument(std::string(op) + ": empty last axis");
    return {x.numel() / d, d};
  }
};

}  // namespace shareformer
