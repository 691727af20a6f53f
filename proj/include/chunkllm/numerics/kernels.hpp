// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Forward and backward kernels on plain tensors. The autodiff graph wraps
// these; inference paths (prefill, incremental decoding) call them directly.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "chunkllm/numerics/tensor.hpp"

namespace chunkllm::kernels {

// Boolean keep-mask over an m x n matrix; 1 = visible.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, std::uint8_t fill = 1) : rows(r), cols(c), keep(r * c, fill) {}

  static Mask causal(std::size_t n) {
    Mask m(n, n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.keep[i * n + j] = 1;
    return m;
  }
  bool visible(std::size_t i, std::size_t j) const { return keep[i * cols + j] != 0; }
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------- matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> c({a.dim(0), b.dim(1)});
  if (a.dim(1) == 0) return c;
  c.mat().noalias() = a.mat() * b.mat();
  return c;
}

// a [m x k] times b^T where b is [n x k].
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_nt lhs");
  require_rank(b, 2, "matmul_nt rhs");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor<T> c({a.dim(0), b.dim(0)});
  if (a.dim(1) == 0) return c;
  c.mat().noalias() = a.mat() * b.mat().transpose();
  return c;
}

// a^T times b where a is [k x m] and b is [k x n].
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_tn lhs");
  require_rank(b, 2, "matmul_tn rhs");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: inner dimensions differ " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  Tensor<T> c({a.dim(1), b.dim(1)});
  if (a.dim(0) == 0) return c;
  c.mat().noalias() = a.mat().transpose() * b.mat();
  return c;
}

// ---------------------------------------------------------------- softmax

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Mask* mask = nullptr) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (mask && (mask->rows != m || mask->cols != n)) {
    throw DimensionError("softmax_rows: mask shape differs from input " + shape_str(x.shape()));
  }
  Tensor<T> y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = x.data() + i * n;
    T* yr = y.data() + i * n;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->visible(i, j)) continue;
      any = true;
      mx = std::max(mx, xr[j]);
    }
    if (!any) throw DomainError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double sum = 0;  // wide accumulator keeps long float rows normalized
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->visible(i, j)) {
        yr[j] = 0;
        continue;
      }
      yr[j] = std::exp(xr[j] - mx);
      sum += static_cast<double>(yr[j]);
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  return y;
}

// dX given Y = softmax(X) and dY. Masked entries have Y == 0 and receive 0.
template <class T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const std::size_t m = y.dim(0), n = y.dim(1);
  Tensor<T> dx({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* yr = y.data() + i * n;
    const T* gr = dy.data() + i * n;
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
    T* out = dx.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------- RoPE

// Rotation angle of pair i at a position: pos * base^(-2i/d_head).
inline double rope_angle(std::size_t pos, std::size_t pair, std::size_t d_head, double base) {
  return static_cast<double>(pos) *
         std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(d_head));
}

// Rotates one head vector of length d_head in place (adjacent pairs). A
// negative sign applies the inverse rotation.
template <class T>
void rope_rotate(T* x, std::size_t d_head, std::size_t pos, double base, double sign = 1.0) {
  for (std::size_t i = 0; i < d_head / 2; ++i) {
    const double ang = sign * rope_angle(pos, i, d_head, base);
    const T c = static_cast<T>(std::cos(ang));
    const T s = static_cast<T>(std::sin(ang));
    const T a = x[2 * i], b = x[2 * i + 1];
    x[2 * i] = a * c - b * s;
    x[2 * i + 1] = a * s + b * c;
  }
}

// X is [n x heads*d_head]; every head slice of row r is rotated to
// positions[r].
template <class T>
Tensor<T> rope_rows(const Tensor<T>& x, std::span<const std::size_t> positions, std::size_t heads,
                    double base, double sign = 1.0) {
  require_rank(x, 2, "rope_rows");
  const std::size_t n = x.dim(0), width = x.dim(1);
  if (heads == 0 || width % heads != 0) throw ConfigError("rope: width not divisible by heads");
  const std::size_t dh = width / heads;
  if (dh % 2 != 0) throw ConfigError("rope: head dimension must be even");
  if (positions.size() != n) throw DimensionError("rope: positions length differs from rows");
  Tensor<T> y = x;
  std::vector<T> cs(dh / 2), sn(dh / 2);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const double ang = sign * rope_angle(positions[r], i, dh, base);
      cs[i] = static_cast<T>(std::cos(ang));
      sn[i] = static_cast<T>(std::sin(ang));
    }
    T* row = y.data() + r * width;
    for (std::size_t h = 0; h < heads; ++h) {
      T* v = row + h * dh;
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const T a = v[2 * i], b = v[2 * i + 1];
        v[2 * i] = a * cs[i] - b * sn[i];
        v[2 * i + 1] = a * sn[i] + b * cs[i];
      }
    }
  }
  return y;
}

// X is [heads x n x d_head].
template <class T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::size_t> positions, double base) {
  require_rank(x, 3, "rope_apply");
  const std::size_t heads = x.dim(0), n = x.dim(1), dh = x.dim(2);
  if (dh % 2 != 0) throw ConfigError("rope_apply: head dimension must be even");
  if (positions.size() != n) throw DimensionError("rope_apply: positions length differs from n");
  Tensor<T> y = x;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < n; ++r) rope_rotate(y.data() + (h * n + r) * dh, dh, positions[r], base);
  return y;
}

// ---------------------------------------------------------------- RMSNorm

inline constexpr double kRmsEps = 1e-6;

template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain) {
  require_rank(x, 2, "rmsnorm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (d == 0) throw DimensionError("rmsnorm: zero width");
  if (gain.size() != d) throw DimensionError("rmsnorm: gain length differs from row width");
  Tensor<T> y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T r = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(kRmsEps));
    T* yr = y.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * r * gain[j];
  }
  return y;
}

template <class T>
void rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                      std::type_identity_t<Tensor<T>>* dx, std::type_identity_t<Tensor<T>>* dgain) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * d;
    const T* gr = dy.data() + i * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T r = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(kRmsEps));
    if (dgain) {
      for (std::size_t j = 0; j < d; ++j) (*dgain)[j] += gr[j] * xr[j] * r;
    }
    if (dx) {
      T ux = 0;
      for (std::size_t j = 0; j < d; ++j) ux += gr[j] * gain[j] * xr[j];
      const T coef = r * r * r * ux / static_cast<T>(d);
      T* out = dx->data() + i * d;
      for (std::size_t j = 0; j < d; ++j) out[j] += r * gr[j] * gain[j] - xr[j] * coef;
    }
  }
}

// ---------------------------------------------------------------- activations

template <class T>
T gelu(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T{0.5} * x * (T{1} + std::tanh(k * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  const T inner = k * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  return T{0.5} * (T{1} + t) +
         T{0.5} * x * (T{1} - t * t) * k * (T{1} + static_cast<T>(3 * 0.044715) * x * x);
}

template <class T>
T sigmoid(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// ---------------------------------------------------------------- losses

inline constexpr double kKlClamp = 1e-9;
inline constexpr double kBceClamp = 1e-7;

// Mean over unmasked rows of sum_j P log(P / Q). 0 log(0/q) := 0 and Q is
// clamped below at 1e-9.
template <class T>
T kl_div_rows(const Tensor<T>& p, const Tensor<T>& q, std::span<const std::uint8_t> row_mask) {
  require_same_shape(p, q, "kl_div_rows");
  require_rank(p, 2, "kl_div_rows");
  const std::size_t m = p.dim(0), c = p.dim(1);
  if (row_mask.size() != m) throw DimensionError("kl_div_rows: row mask length differs from rows");
  double total = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask[i]) continue;
    ++used;
    double row = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double pv = p.at(i, j);
      if (pv <= 0) continue;
      const double qv = std::max<double>(q.at(i, j), kKlClamp);
      row += pv * std::log(pv / qv);
    }
    total += row;
  }
  if (used == 0) throw DomainError("kl_div_rows: no unmasked rows");
  return static_cast<T>(total / static_cast<double>(used));
}

template <class T>
std::size_t count_rows(std::span<const std::uint8_t> row_mask) {
  std::size_t n = 0;
  for (auto v : row_mask) n += v != 0;
  return n;
}

// Gradients of kl_div_rows scaled by an upstream scalar gradient.
template <class T>
void kl_div_rows_backward(const Tensor<T>& p, const Tensor<T>& q, std::span<const std::uint8_t> row_mask,
                          T upstream, std::type_identity_t<Tensor<T>>* dp, std::type_identity_t<Tensor<T>>* dq) {
  const std::size_t m = p.dim(0), c = p.dim(1);
  const T scale = upstream / static_cast<T>(count_rows<T>(row_mask));
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask[i]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const T pv = p.at(i, j);
      if (pv <= 0) continue;
      const T qraw = q.at(i, j);
      const bool clamped = qraw < static_cast<T>(kKlClamp);
      const T qv = clamped ? static_cast<T>(kKlClamp) : qraw;
      if (dq && !clamped) dq->at(i, j) += -scale * pv / qv;
      if (dp) dp->at(i, j) += scale * (std::log(pv / qv) + T{1});
    }
  }
}

// -(1/n) sum [w_pos y log p + (1 - y) log(1 - p)], p clamped to
// [1e-7, 1 - 1e-7].
template <class T>
T bce_loss(const Tensor<T>& probs, const Tensor<T>& labels, T pos_weight = T{1}) {
  require_same_shape(probs, labels, "bce_loss");
  const std::size_t n = probs.size();
  if (n == 0) throw DomainError("bce_loss: empty input");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp<double>(probs[i], kBceClamp, 1.0 - kBceClamp);
    const double y = labels[i];
    total += pos_weight * y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return static_cast<T>(-total / static_cast<double>(n));
}

// Same loss evaluated from logits z with p = sigmoid(z); no clamp is needed
// because log-sigmoid is computed stably.
template <class T>
T bce_with_logits(const Tensor<T>& logits, const Tensor<T>& labels, T pos_weight = T{1}) {
  require_same_shape(logits, labels, "bce_with_logits");
  const std::size_t n = logits.size();
  if (n == 0) throw DomainError("bce_with_logits: empty input");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[i];
    const double y = labels[i];
    // log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
    const double sp_pos = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    const double sp_neg = sp_pos - z;
    total += pos_weight * y * sp_neg + (1.0 - y) * sp_pos;
  }
  return static_cast<T>(total / static_cast<double>(n));
}

// Weighted mean of -log softmax(logits)[target]. Weights default to 1.
template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const T> weights = {}) {
  require_rank(logits, 2, "cross_entropy_loss");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) throw DimensionError("cross_entropy_loss: targets length differs from rows");
  if (!weights.empty() && weights.size() != n) throw DimensionError("cross_entropy_loss: weights length");
  double total = 0, wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy_loss: target " + std::to_string(t) + " outside [0," +
                       std::to_string(v) + ")");
    }
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[i]);
    if (w == 0) continue;
    const T* row = logits.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max<double>(mx, row[j]);
    double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    total += w * (std::log(s) + mx - static_cast<double>(row[t]));
    wsum += w;
  }
  if (wsum <= 0) throw DomainError("cross_entropy_loss: no weighted targets");
  return static_cast<T>(total / wsum);
}

template <class T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, std::span<const int> targets,
                                 std::span<const T> weights, T upstream) {
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  double wsum = 0;
  for (std::size_t i = 0; i < n; ++i) wsum += weights.empty() ? 1.0 : static_cast<double>(weights[i]);
  Tensor<T> g({n, v});
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[i]);
    if (w == 0) continue;
    const T* row = logits.data() + i * v;
    T* out = g.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max<double>(mx, row[j]);
    double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    const double scale = static_cast<double>(upstream) * w / wsum;
    for (std::size_t j = 0; j < v; ++j) {
      out[j] = static_cast<T>(scale * std::exp(static_cast<double>(row[j]) - mx) / s);
    }
    out[targets[i]] -= static_cast<T>(scale);
  }
  return g;
}

// ---------------------------------------------------------------- attention

// Causal multi-head attention over [n x heads*d_head] inputs, processed in
// row blocks so the full n x n score matrix is never materialized. lse keeps
// each row's log-sum-exp for the backward recomputation. When probs is
// non-null it receives the [heads x n x n] attention matrices.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                           std::type_identity_t<Tensor<T>>* lse = nullptr,
                           std::type_identity_t<Tensor<T>>* probs = nullptr) {
  require_rank(q, 2, "attention q");
  require_same_shape(q, k, "attention q/k");
  require_same_shape(q, v, "attention q/v");
  const std::size_t n = q.dim(0), width = q.dim(1);
  if (heads == 0 || width % heads != 0) throw ConfigError("attention: width not divisible by heads");
  const std::size_t dh = width / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  constexpr std::size_t kBlock = 128;
  const auto ld = static_cast<Eigen::Index>(width);
  const auto edh = static_cast<Eigen::Index>(dh);

  Tensor<T> out({n, width});
  if (lse) *lse = Tensor<T>({heads, n});
  if (probs) *probs = Tensor<T>({heads, n, n});
  RowMatrix<T> s;
  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap<T> qh(q.data() + h * dh, static_cast<Eigen::Index>(n), edh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> kh(k.data() + h * dh, static_cast<Eigen::Index>(n), edh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> vh(v.data() + h * dh, static_cast<Eigen::Index>(n), edh, Eigen::OuterStride<>(ld));
    StridedMap<T> oh(out.data() + h * dh, static_cast<Eigen::Index>(n), edh, Eigen::OuterStride<>(ld));
    for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
      const std::size_t r1 = std::min(n, r0 + kBlock);
      const auto b = static_cast<Eigen::Index>(r1 - r0);
      const auto span = static_cast<Eigen::Index>(r1);
      s.resize(b, span);
      s.noalias() = qh.middleRows(static_cast<Eigen::Index>(r0), b) * kh.topRows(span).transpose();
      for (Eigen::Index ii = 0; ii < b; ++ii) {
        const std::size_t i = r0 + static_cast<std::size_t>(ii);
        T* row = s.data() + ii * span;
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> seg(row, static_cast<Eigen::Index>(i + 1));
        seg *= scale;
        const T mx = seg.maxCoeff();
        seg = (seg - mx).exp();
        const T sum = seg.sum();
        seg *= T{1} / sum;
        for (std::size_t j = i + 1; j < r1; ++j) row[j] = 0;
        if (lse) lse->at(h, i) = mx + std::log(sum);
        if (probs) std::copy(row, row + r1, probs->data() + (h * n + i) * n);
      }
      oh.middleRows(static_cast<Eigen::Index>(r0), b).noalias() = s * vh.topRows(span);
    }
  }
  return out;
}

// Accumulates dq, dk, dv for causal_attention given the forward output and
// the per-row log-sum-exp.
template <class T>
void causal_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               const Tensor<T>& out, const Tensor<T>& lse, const Tensor<T>& dout,
                               std::type_identity_t<Tensor<T>>* dq, std::type_identity_t<Tensor<T>>* dk,
                               std::type_identity_t<Tensor<T>>* dv) {
  const std::size_t n = q.dim(0), width = q.dim(1);
  const std::size_t dh = width / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  constexpr std::size_t kBlock = 128;
  const auto ld = static_cast<Eigen::Index>(width);
  const auto edh = static_cast<Eigen::Index>(dh);
  const auto en = static_cast<Eigen::Index>(n);

  Tensor<T> dq_local, dk_local, dv_local;
  if (!dq) { dq_local = Tensor<T>({n, width}); dq = &dq_local; }
  if (!dk) { dk_local = Tensor<T>({n, width}); dk = &dk_local; }
  if (!dv) { dv_local = Tensor<T>({n, width}); dv = &dv_local; }

  RowMatrix<T> p, dp;
  std::vector<T> rowdot(n);
  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap<T> qh(q.data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> kh(k.data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> vh(v.data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> oh(out.data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> doh(dout.data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    StridedMap<T> dqh(dq->data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    StridedMap<T> dkh(dk->data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    StridedMap<T> dvh(dv->data() + h * dh, en, edh, Eigen::OuterStride<>(ld));
    for (std::size_t i = 0; i < n; ++i) {
      rowdot[i] = oh.row(static_cast<Eigen::Index>(i)).dot(doh.row(static_cast<Eigen::Index>(i)));
    }
    for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
      const std::size_t r1 = std::min(n, r0 + kBlock);
      const auto b = static_cast<Eigen::Index>(r1 - r0);
      const auto span = static_cast<Eigen::Index>(r1);
      const auto er0 = static_cast<Eigen::Index>(r0);
      p.resize(b, span);
      p.noalias() = qh.middleRows(er0, b) * kh.topRows(span).transpose();
      for (Eigen::Index ii = 0; ii < b; ++ii) {
        const std::size_t i = r0 + static_cast<std::size_t>(ii);
        T* row = p.data() + ii * span;
        const T l = lse.at(h, i);
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> seg(row, static_cast<Eigen::Index>(i + 1));
        seg = (seg * scale - l).exp();
        for (std::size_t j = i + 1; j < r1; ++j) row[j] = 0;
      }
      dp.resize(b, span);
      dp.noalias() = doh.middleRows(er0, b) * vh.topRows(span).transpose();
      for (Eigen::Index ii = 0; ii < b; ++ii) {
        const T d = rowdot[r0 + static_cast<std::size_t>(ii)];
        T* prow = p.data() + ii * span;
        T* drow = dp.data() + ii * span;
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> pa(prow, span);
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> da(drow, span);
        da = pa * (da - d) * scale;
      }
      dvh.topRows(span).noalias() += p.transpose() * doh.middleRows(er0, b);
      dqh.middleRows(er0, b).noalias() += dp * kh.topRows(span);
      dkh.topRows(span).noalias() += dp.transpose() * qh.middleRows(er0, b);
    }
  }
}

}  // namespace chunkllm::kernels
