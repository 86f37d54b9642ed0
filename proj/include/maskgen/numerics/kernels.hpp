// SPDX-License-Identifier: Apache-2.0
//
// Raw dense kernels. These work on plain tensors and carry no gradient
// bookkeeping; the differentiable ops in ops.hpp are thin wrappers around
// them. Every reduction accumulates in double regardless of storage type.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "maskgen/numerics/op_counter.hpp"
#include "maskgen/numerics/tensor.hpp"

namespace maskgen::kernels {

namespace detail {
using Lanes8 = double __attribute__((vector_size(64)));
using Floats8 = float __attribute__((vector_size(32)));

template <class T>
void store8(T* dst, Lanes8 v) {
  if constexpr (std::is_same_v<T, double>) {
    std::memcpy(dst, &v, sizeof v);
  } else {
    const Floats8 f = __builtin_convertvector(v, Floats8);
    std::memcpy(dst, &f, sizeof f);
  }
}
}  // namespace detail

/// c[m x n] = a[m x k] * b[k x n], all row-major. Each output is summed in
/// f64 over p = 0..k-1 in order, whatever the storage type.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  using detail::Lanes8;
  constexpr std::size_t kRows = 8;
  constexpr std::size_t kCols = 16;
  constexpr std::size_t kRowBlock = 64;
  const std::size_t panels = (n + kCols - 1) / kCols;
  std::vector<Lanes8> packed(panels * k * 2);
  for (std::size_t jp = 0; jp < panels; ++jp) {
    const std::size_t j0 = jp * kCols;
    const std::size_t cols = std::min(kCols, n - j0);
    Lanes8* panel = packed.data() + jp * k * 2;
    for (std::size_t p = 0; p < k; ++p) {
      Lanes8 lanes[2] = {};
      const T* src = b + p * n + j0;
      for (std::size_t j = 0; j < cols; ++j) lanes[j / 8][j % 8] = static_cast<double>(src[j]);
      panel[2 * p] = lanes[0];
      panel[2 * p + 1] = lanes[1];
    }
  }
  // A tiles of kRows rows, interleaved as [p][r] so each step reads one line.
  std::vector<double> apack(kRowBlock * k);
  for (std::size_t ib = 0; ib < m; ib += kRowBlock) {
    const std::size_t iend = std::min(m, ib + kRowBlock);
    for (std::size_t i0 = ib; i0 < iend; i0 += kRows) {
      double* tile = apack.data() + (i0 - ib) * k;
      const std::size_t rows = std::min(kRows, iend - i0);
      for (std::size_t r = 0; r < kRows; ++r) {
        const T* src = a + (i0 + std::min(r, rows - 1)) * k;
        for (std::size_t p = 0; p < k; ++p) tile[p * kRows + r] = static_cast<double>(src[p]);
      }
    }
    for (std::size_t jp = 0; jp < panels; ++jp) {
      const std::size_t j0 = jp * kCols;
      const std::size_t cols = std::min(kCols, n - j0);
      const Lanes8* panel = packed.data() + jp * k * 2;
      for (std::size_t i0 = ib; i0 < iend; i0 += kRows) {
        const std::size_t rows = std::min(kRows, iend - i0);
        const double* tile = apack.data() + (i0 - ib) * k;
        Lanes8 c00 = {}, c01 = {}, c10 = {}, c11 = {}, c20 = {}, c21 = {}, c30 = {}, c31 = {};
        Lanes8 c40 = {}, c41 = {}, c50 = {}, c51 = {}, c60 = {}, c61 = {}, c70 = {}, c71 = {};
        for (std::size_t p = 0; p < k; ++p) {
          const Lanes8 b0 = panel[2 * p];
          const Lanes8 b1 = panel[2 * p + 1];
          const double* ap = tile + p * kRows;
          c00 += ap[0] * b0; c01 += ap[0] * b1;
          c10 += ap[1] * b0; c11 += ap[1] * b1;
          c20 += ap[2] * b0; c21 += ap[2] * b1;
          c30 += ap[3] * b0; c31 += ap[3] * b1;
          c40 += ap[4] * b0; c41 += ap[4] * b1;
          c50 += ap[5] * b0; c51 += ap[5] * b1;
          c60 += ap[6] * b0; c61 += ap[6] * b1;
          c70 += ap[7] * b0; c71 += ap[7] * b1;
        }
        const Lanes8 acc[kRows][2] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31},
                                      {c40, c41}, {c50, c51}, {c60, c61}, {c70, c71}};
        for (std::size_t r = 0; r < rows; ++r) {
          T* crow = c + (i0 + r) * n + j0;
          if (cols == kCols) {
            detail::store8(crow, acc[r][0]);
            detail::store8(crow + 8, acc[r][1]);
          } else {
            for (std::size_t j = 0; j < cols; ++j) crow[j] = static_cast<T>(acc[r][j / 8][j % 8]);
          }
        }
      }
    }
  }
}

template <class T>
void transpose(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t ie = std::min(rows, i0 + kBlock);
      const std::size_t je = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < ie; ++i) {
        for (std::size_t j = j0; j < je; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

/// Geometry of a (possibly batched) matrix product.
struct MatmulDims {
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  bool shared_rhs = false;  // rhs is a single rank-2 matrix reused by every batch item
  Shape out;
};

/// Validates `a[..., m, k] x b[..., k, n]` (or `b[..., n, k]` when
/// `transpose_b`). `b` is either rank 2, or carries the same leading
/// extents as `a`.
inline MatmulDims matmul_dims(const Shape& a, const Shape& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  MatmulDims d;
  d.m = a[a.rank() - 2];
  d.k = a.back();
  const std::size_t bk = transpose_b ? b.back() : b[b.rank() - 2];
  d.n = transpose_b ? b[b.rank() - 2] : b.back();
  if (bk != d.k) {
    throw DimensionError("matmul inner extents differ: " + a.to_string() + " x " + b.to_string());
  }
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) d.batch *= a[i];
  if (b.rank() == 2) {
    d.shared_rhs = true;
  } else {
    if (b.rank() != a.rank()) throw DimensionError("batched matmul rank mismatch");
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
      if (a[i] != b[i]) throw DimensionError("batched matmul leading extents differ");
    }
  }
  std::vector<std::size_t> out(a.dims().begin(), a.dims().end());
  out.back() = d.n;
  d.out = Shape(std::span<const std::size_t>(out));
  return d;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const MatmulDims d = matmul_dims(a.shape(), b.shape(), transpose_b);
  Tensor<T> out(d.out);
  const std::size_t rhs_items = d.shared_rhs ? 1 : d.batch;
  std::vector<T> bt;
  if (transpose_b) {
    bt.resize(rhs_items * d.k * d.n);
    for (std::size_t i = 0; i < rhs_items; ++i) {
      transpose(b.data().data() + i * d.n * d.k, bt.data() + i * d.k * d.n, d.n, d.k);
    }
  }
  const T* bp = transpose_b ? bt.data() : b.data().data();
  for (std::size_t i = 0; i < d.batch; ++i) {
    const T* rhs = bp + (d.shared_rhs ? 0 : i * d.k * d.n);
    gemm(a.data().data() + i * d.m * d.k, rhs, out.data().data() + i * d.m * d.n, d.m, d.k, d.n);
  }
  count_multiplies(static_cast<std::uint64_t>(d.batch) * d.m * d.k * d.n);
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise support.

struct Broadcast {
  std::array<std::size_t, kMaxRank> out{};
  std::array<std::size_t, kMaxRank> stride_a{};
  std::array<std::size_t, kMaxRank> stride_b{};
  Shape shape;
};

inline std::array<std::size_t, kMaxRank> broadcast_strides(const std::array<std::size_t, kMaxRank>& dims,
                                                           const std::array<std::size_t, kMaxRank>& out) {
  std::array<std::size_t, kMaxRank> s{};
  std::size_t acc = 1;
  for (int i = static_cast<int>(kMaxRank) - 1; i >= 0; --i) {
    s[i] = (dims[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= dims[i];
  }
  return s;
}

/// Right-aligned numpy-style broadcast of two shapes.
inline Broadcast broadcast(const Shape& a, const Shape& b) {
  const auto pa = a.padded();
  const auto pb = b.padded();
  Broadcast bc;
  for (std::size_t i = 0; i < kMaxRank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("cannot broadcast " + a.to_string() + " with " + b.to_string());
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  bc.stride_a = broadcast_strides(pa, bc.out);
  bc.stride_b = broadcast_strides(pb, bc.out);
  const std::size_t rank = std::max(a.rank(), b.rank());
  bc.shape = Shape(std::span<const std::size_t>(bc.out.data() + kMaxRank - rank, rank));
  return bc;
}

/// Calls f(out_index, a_offset, b_offset) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < bc.out[0]; ++i0) {
    for (std::size_t i1 = 0; i1 < bc.out[1]; ++i1) {
      for (std::size_t i2 = 0; i2 < bc.out[2]; ++i2) {
        const std::size_t ra = i0 * bc.stride_a[0] + i1 * bc.stride_a[1] + i2 * bc.stride_a[2];
        const std::size_t rb = i0 * bc.stride_b[0] + i1 * bc.stride_b[1] + i2 * bc.stride_b[2];
        const std::size_t sa = bc.stride_a[3];
        const std::size_t sb = bc.stride_b[3];
        for (std::size_t i3 = 0; i3 < bc.out[3]; ++i3, ++o) f(o, ra + i3 * sa, rb + i3 * sb);
      }
    }
  }
}

/// Sums `grad` (shaped like the broadcast output) back onto an operand
/// described by `stride` and `operand_shape`.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& grad, const Broadcast& bc, bool lhs, const Shape& operand_shape) {
  std::vector<double> acc(operand_shape.numel(), 0.0);
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    acc[lhs ? ia : ib] += static_cast<double>(grad[o]);
  });
  return Tensor<T>(operand_shape, std::vector<T>(acc.begin(), acc.end()));
}

// ---------------------------------------------------------------------------
// Softmax family over the last dimension.

/// `key_mask`, when non-empty, has `dim(0) * last` entries: entry
/// (g, j) = 0 excludes key j from every row belonging to leading index g.
/// Excluded keys get exactly zero weight, the same as an additive -inf logit.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> key_mask = {}) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const std::size_t groups = x.rank() == 1 ? 1 : x.dim(0);
  if (!key_mask.empty() && key_mask.size() != groups * n) {
    throw DimensionError("softmax key mask has " + std::to_string(key_mask.size()) + " entries, expected " +
                         std::to_string(groups * n));
  }
  const std::size_t rows_per_group = rows / groups;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T* yr = y.data().data() + r * n;
    const std::uint8_t* mr = key_mask.empty() ? nullptr : key_mask.data() + (r / rows_per_group) * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!mr || mr[j]) mx = std::max(mx, static_cast<double>(xr[j]));
    }
    if (!std::isfinite(mx)) throw NumericError("softmax row has no valid entries");
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mr && !mr[j]) continue;
      sum += std::exp(static_cast<double>(xr[j]) - mx);
    }
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = (mr && !mr[j]) ? T(0) : static_cast<T>(std::exp(static_cast<double>(xr[j]) - mx) / sum);
    }
  }
  return y;
}

template <class T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const std::size_t n = y.shape().back();
  const std::size_t rows = y.size() / n;
  Tensor<T> dx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = y.data().data() + r * n;
    const T* gr = dy.data().data() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(yr[j]) * gr[j];
    for (std::size_t j = 0; j < n; ++j) {
      dx[r * n + j] = static_cast<T>(static_cast<double>(yr[j]) * (gr[j] - dot));
    }
  }
  return dx;
}

template <class T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = static_cast<T>(xr[j] - lse);
  }
  return y;
}

template <class T>
Tensor<T> log_softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const std::size_t n = y.shape().back();
  const std::size_t rows = y.size() / n;
  Tensor<T> dx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double gsum = 0.0;
    for (std::size_t j = 0; j < n; ++j) gsum += dy[r * n + j];
    for (std::size_t j = 0; j < n; ++j) {
      dx[r * n + j] = static_cast<T>(dy[r * n + j] - std::exp(static_cast<double>(y[r * n + j])) * gsum);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layer norm (no affine part) and L2 norm over the last dimension.

template <class T>
struct LayerNormResult {
  Tensor<T> y;
  std::vector<double> rstd;
};

template <class T>
LayerNormResult<T> layer_norm_lastdim(const Tensor<T>& x, double eps) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  LayerNormResult<T> res{Tensor<T>(x.shape()), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    res.rstd[r] = rstd;
    for (std::size_t j = 0; j < n; ++j) res.y[r * n + j] = static_cast<T>((xr[j] - mean) * rstd);
  }
  return res;
}

template <class T>
Tensor<T> layer_norm_lastdim_backward(const LayerNormResult<T>& fwd, const Tensor<T>& dy) {
  const std::size_t n = fwd.y.shape().back();
  const std::size_t rows = fwd.y.size() / n;
  Tensor<T> dx(fwd.y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double gmean = 0.0;
    double gy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      gmean += dy[r * n + j];
      gy += static_cast<double>(dy[r * n + j]) * fwd.y[r * n + j];
    }
    gmean /= static_cast<double>(n);
    gy /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      dx[r * n + j] = static_cast<T>(fwd.rstd[r] * (dy[r * n + j] - gmean - fwd.y[r * n + j] * gy));
    }
  }
  return dx;
}

template <class T>
Tensor<T> l2norm_lastdim(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> y(x.shape().drop_last());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(x[r * n + j]) * x[r * n + j];
    y[r] = static_cast<T>(std::sqrt(s));
  }
  return y;
}

template <class T>
Tensor<T> sum_lastdim(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> y(x.shape().drop_last());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[r * n + j];
    y[r] = static_cast<T>(s);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Bilinear resampling of B x C x H x W maps, align_corners = false.

struct AxisTaps {
  std::vector<std::size_t> lo;
  std::vector<std::size_t> hi;
  std::vector<double> frac;  // weight of `hi`
};

inline AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw DimensionError("bilinear resize expects B x C x H x W, got " + x.shape().to_string());
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const AxisTaps ty = bilinear_taps(h, out_h);
  const AxisTaps tx = bilinear_taps(w, out_w);
  Tensor<T> y(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * h * w;
    T* dst = y.data().data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T* r0 = src + ty.lo[oy] * w;
      const T* r1 = src + ty.hi[oy] * w;
      const double fy = ty.frac[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double fx = tx.frac[ox];
        const double top = r0[tx.lo[ox]] + fx * (static_cast<double>(r0[tx.hi[ox]]) - r0[tx.lo[ox]]);
        const double bot = r1[tx.lo[ox]] + fx * (static_cast<double>(r1[tx.hi[ox]]) - r1[tx.lo[ox]]);
        dst[oy * out_w + ox] = static_cast<T>(top + fy * (bot - top));
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& dy, const Shape& in_shape) {
  const std::size_t planes = in_shape[0] * in_shape[1];
  const std::size_t h = in_shape[2];
  const std::size_t w = in_shape[3];
  const std::size_t out_h = dy.dim(2);
  const std::size_t out_w = dy.dim(3);
  const AxisTaps ty = bilinear_taps(h, out_h);
  const AxisTaps tx = bilinear_taps(w, out_w);
  std::vector<double> acc(in_shape.numel(), 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    double* dst = acc.data() + p * h * w;
    const T* g = dy.data().data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double fy = ty.frac[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double fx = tx.frac[ox];
        const double v = g[oy * out_w + ox];
        dst[ty.lo[oy] * w + tx.lo[ox]] += v * (1 - fy) * (1 - fx);
        dst[ty.lo[oy] * w + tx.hi[ox]] += v * (1 - fy) * fx;
        dst[ty.hi[oy] * w + tx.lo[ox]] += v * fy * (1 - fx);
        dst[ty.hi[oy] * w + tx.hi[ox]] += v * fy * fx;
      }
    }
  }
  return Tensor<T>(in_shape, std::vector<T>(acc.begin(), acc.end()));
}

// ---------------------------------------------------------------------------
// Row gather / scatter. A tensor is viewed as rows of `row` contiguous
// values; index -1 selects an all-zero row.

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::size_t row, std::span<const std::int64_t> index, const Shape& out_shape) {
  if (out_shape.numel() != index.size() * row) throw DimensionError("gather output shape does not match index length");
  const std::size_t in_rows = x.size() / row;
  Tensor<T> y(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t s = index[i];
    if (s < 0) continue;
    if (static_cast<std::size_t>(s) >= in_rows) throw DimensionError("gather index out of range");
    std::copy_n(x.data().data() + static_cast<std::size_t>(s) * row, row, y.data().data() + i * row);
  }
  return y;
}

template <class T>
Tensor<T> scatter_add_rows(const Tensor<T>& src, std::size_t row, std::span<const std::int64_t> index, const Shape& out_shape) {
  if (src.size() != index.size() * row) throw DimensionError("scatter source does not match index length");
  const std::size_t out_rows = out_shape.numel() / row;
  std::vector<double> acc(out_shape.numel(), 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t d = index[i];
    if (d < 0) continue;
    if (static_cast<std::size_t>(d) >= out_rows) throw DimensionError("scatter index out of range");
    double* dst = acc.data() + static_cast<std::size_t>(d) * row;
    const T* s = src.data().data() + i * row;
    for (std::size_t j = 0; j < row; ++j) dst[j] += s[j];
  }
  return Tensor<T>(out_shape, std::vector<T>(acc.begin(), acc.end()));
}

}  // namespace maskgen::kernels
