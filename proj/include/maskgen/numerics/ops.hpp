// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations on Var. The recorded primitive set is small:
// matmul, broadcast add/mul, sigmoid, softmax, layer norm, L2 norm,
// bilinear resampling and row gather/scatter, plus a handful of pointwise
// maps and last-dim sums needed by the losses. Everything else in the
// library is composed from these.
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "maskgen/numerics/autodiff.hpp"
#include "maskgen/numerics/kernels.hpp"

namespace maskgen {

using Index = std::vector<std::int64_t>;
using IndexPtr = std::shared_ptr<const Index>;

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  Tensor<T> out = kernels::matmul(a.value(), b.value(), transpose_b);
  return detail::make_result<T>("matmul", std::move(out), {&a, &b}, [transpose_b](detail::Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const Tensor<T>& g = self.grad;
    const auto d = kernels::matmul_dims(pa->value.shape(), pb->value.shape(), transpose_b);
    if (pa->tape) {
      // dA = G * B^T  (or G * B when b was used transposed)
      detail::push_grad(pa, kernels::matmul(g, pb->value, !transpose_b).reshaped(pa->value.shape()));
    }
    if (pb->tape) {
      Tensor<T> gb(pb->value.shape());
      const std::size_t items = d.batch;
      std::vector<T> at(d.k * d.m);
      std::vector<T> tmp(d.k * d.n);
      std::vector<double> acc(pb->value.size(), 0.0);
      for (std::size_t i = 0; i < items; ++i) {
        const T* ai = pa->value.data().data() + i * d.m * d.k;
        const T* gi = g.data().data() + i * d.m * d.n;
        kernels::transpose(ai, at.data(), d.m, d.k);
        // A^T G : k x n
        kernels::gemm(at.data(), gi, tmp.data(), d.k, d.m, d.n);
        double* dst = acc.data() + (d.shared_rhs ? 0 : i * d.k * d.n);
        if (transpose_b) {
          for (std::size_t r = 0; r < d.k; ++r) {
            for (std::size_t c = 0; c < d.n; ++c) dst[c * d.k + r] += tmp[r * d.n + c];
          }
        } else {
          for (std::size_t j = 0; j < d.k * d.n; ++j) dst[j] += tmp[j];
        }
      }
      for (std::size_t j = 0; j < acc.size(); ++j) gb[j] = static_cast<T>(acc[j]);
      detail::push_grad(pb, gb);
    }
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto bc = kernels::broadcast(a.shape(), b.shape());
  Tensor<T> out(bc.shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  kernels::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] + bv[ib]; });
  return detail::make_result<T>("add", std::move(out), {&a, &b}, [bc](detail::Node<T>& self) {
    for (int side = 0; side < 2; ++side) {
      auto& p = self.parents[side];
      if (!p->tape) continue;
      if (p->value.shape() == self.value.shape()) {
        detail::push_grad(p, self.grad);
      } else {
        detail::push_grad(p, kernels::reduce_to(self.grad, bc, side == 0, p->value.shape()));
      }
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto bc = kernels::broadcast(a.shape(), b.shape());
  Tensor<T> out(bc.shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  kernels::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] * bv[ib]; });
  return detail::make_result<T>("mul", std::move(out), {&a, &b}, [bc](detail::Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const auto& av = pa->value;
    const auto& bv = pb->value;
    const auto& g = self.grad;
    if (pa->tape) {
      std::vector<double> acc(av.size(), 0.0);
      kernels::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        acc[ia] += static_cast<double>(g[o]) * bv[ib];
      });
      detail::push_grad(pa, Tensor<T>(av.shape(), std::vector<T>(acc.begin(), acc.end())));
    }
    if (pb->tape) {
      std::vector<double> acc(bv.size(), 0.0);
      kernels::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        acc[ib] += static_cast<double>(g[o]) * av[ia];
      });
      detail::push_grad(pb, Tensor<T>(bv.shape(), std::vector<T>(acc.begin(), acc.end())));
    }
  });
}

namespace detail {

/// Pointwise map y = f(x) with derivative df(x, y).
template <class T, class F, class DF>
Var<T> pointwise(const char* name, const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(f(static_cast<double>(xv[i])));
  return make_result<T>(name, std::move(out), {&x}, [df](Node<T>& self) {
    auto& p = self.parents[0];
    Tensor<T> g(p->value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = static_cast<T>(self.grad[i] * df(static_cast<double>(p->value[i]), static_cast<double>(self.value[i])));
    }
    push_grad(p, g);
  });
}

}  // namespace detail

template <class T>
Var<T> scale(const Var<T>& x, double s) {
  return detail::pointwise<T>("scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, double s) {
  return detail::pointwise<T>("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

template <class T>
Var<T> neg(const Var<T>& x) {
  return scale(x, -1.0);
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, neg(b));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::pointwise<T>(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

template <class T>
Var<T> log(const Var<T>& x) {
  return detail::pointwise<T>("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::pointwise<T>("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

template <class T>
Var<T> reciprocal(const Var<T>& x) {
  return detail::pointwise<T>("reciprocal", x, [](double v) { return 1.0 / v; },
                              [](double v, double) { return -1.0 / (v * v); });
}

/// x^p for a constant exponent; p = 0 yields ones with zero gradient.
template <class T>
Var<T> pow_scalar(const Var<T>& x, double p) {
  return detail::pointwise<T>(
      "pow", x, [p](double v) { return p == 0.0 ? 1.0 : std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Var<T> clamp(const Var<T>& x, double lo, double hi) {
  return detail::pointwise<T>(
      "clamp", x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

/// Smooth GELU approximation x * sigmoid(1.702 x), composed from primitives.
template <class T>
Var<T> gelu(const Var<T>& x) {
  return mul(x, sigmoid(scale(x, 1.702)));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(s);
  return detail::make_result<T>("reshape", std::move(out), {&x}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    detail::push_grad(p, self.grad.reshaped(p->value.shape()));
  });
}

/// Softmax over the last dimension. See kernels::softmax_lastdim for the
/// key-mask layout.
template <class T>
Var<T> softmax_lastdim(const Var<T>& x, std::span<const std::uint8_t> key_mask = {}) {
  Tensor<T> y = kernels::softmax_lastdim(x.value(), key_mask);
  return detail::make_result<T>("softmax", std::move(y), {&x}, [](detail::Node<T>& self) {
    detail::push_grad(self.parents[0], kernels::softmax_lastdim_backward(self.value, self.grad));
  });
}

template <class T>
Var<T> log_softmax_lastdim(const Var<T>& x) {
  Tensor<T> y = kernels::log_softmax_lastdim(x.value());
  return detail::make_result<T>("log_softmax", std::move(y), {&x}, [](detail::Node<T>& self) {
    detail::push_grad(self.parents[0], kernels::log_softmax_lastdim_backward(self.value, self.grad));
  });
}

template <class T>
Var<T> layer_norm_lastdim(const Var<T>& x, double eps = 1e-5) {
  auto fwd = std::make_shared<kernels::LayerNormResult<T>>(kernels::layer_norm_lastdim(x.value(), eps));
  Tensor<T> y = fwd->y;
  Var<T> out = detail::make_result<T>("layer_norm", std::move(y), {&x}, [fwd](detail::Node<T>& self) {
    detail::push_grad(self.parents[0], kernels::layer_norm_lastdim_backward(*fwd, self.grad));
  });
  return out;
}

/// Euclidean norm over the last dimension; the gradient at a zero vector is
/// taken as zero.
template <class T>
Var<T> l2norm_lastdim(const Var<T>& x) {
  Tensor<T> y = kernels::l2norm_lastdim(x.value());
  return detail::make_result<T>("l2norm", std::move(y), {&x}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    const std::size_t n = p->value.shape().back();
    Tensor<T> g(p->value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double nrm = self.value[i / n];
      g[i] = nrm > 0 ? static_cast<T>(self.grad[i / n] * p->value[i] / nrm) : T(0);
    }
    detail::push_grad(p, g);
  });
}

template <class T>
Var<T> sum_lastdim(const Var<T>& x) {
  Tensor<T> y = kernels::sum_lastdim(x.value());
  return detail::make_result<T>("sum", std::move(y), {&x}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    const std::size_t n = p->value.shape().back();
    Tensor<T> g(p->value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i / n];
    detail::push_grad(p, g);
  });
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
  return sum_lastdim(reshape(x, Shape{x.size()}));
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

/// Row gather: the input is viewed as rows of `row` values, output row i is
/// input row index[i] (or zeros for -1).
template <class T>
Var<T> gather_rows(const Var<T>& x, std::size_t row, IndexPtr index, Shape out_shape) {
  Tensor<T> y = kernels::gather_rows(x.value(), row, *index, out_shape);
  return detail::make_result<T>("gather", std::move(y), {&x}, [row, index](detail::Node<T>& self) {
    auto& p = self.parents[0];
    detail::push_grad(p, kernels::scatter_add_rows(self.grad, row, *index, p->value.shape()));
  });
}

/// Adjoint of gather_rows: row i of `x` is added into output row index[i].
template <class T>
Var<T> scatter_rows(const Var<T>& x, std::size_t row, IndexPtr index, Shape out_shape) {
  Tensor<T> y = kernels::scatter_add_rows(x.value(), row, *index, out_shape);
  return detail::make_result<T>("scatter", std::move(y), {&x}, [row, index](detail::Node<T>& self) {
    auto& p = self.parents[0];
    detail::push_grad(p, kernels::gather_rows(self.grad, row, *index, p->value.shape()));
  });
}

template <class T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  Tensor<T> y = kernels::bilinear_resize(x.value(), out_h, out_w);
  return detail::make_result<T>("bilinear", std::move(y), {&x}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    detail::push_grad(p, kernels::bilinear_resize_backward(self.grad, p->value.shape()));
  });
}

/// Bilinear upsampling of a B x C x H x W map by an integer factor
/// (align_corners = false); factor 1 is the identity.
template <class T>
Var<T> bilinear_upsample(const Var<T>& x, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  if (x.shape().rank() != 4) throw DimensionError("bilinear upsample expects B x C x H x W");
  return bilinear_resize(x, x.shape()[2] * static_cast<std::size_t>(factor), x.shape()[3] * static_cast<std::size_t>(factor));
}

// ---------------------------------------------------------------------------
// Composite helpers.

/// Index map for an axis permutation of a tensor of `shape`, element-wise.
inline IndexPtr permute_index(const Shape& shape, std::span<const std::size_t> perm, Shape* out_shape) {
  const std::size_t r = shape.rank();
  if (perm.size() != r) throw DimensionError("permutation rank mismatch");
  std::array<std::size_t, kMaxRank> in_stride{};
  std::size_t acc = 1;
  for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
    in_stride[i] = acc;
    acc *= shape[i];
  }
  std::vector<std::size_t> od(r);
  for (std::size_t i = 0; i < r; ++i) od[i] = shape[perm[i]];
  *out_shape = Shape(std::span<const std::size_t>(od));
  auto index = std::make_shared<Index>(shape.numel());
  std::array<std::size_t, kMaxRank> ix{};
  for (std::size_t o = 0; o < index->size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += ix[i] * in_stride[perm[i]];
    (*index)[o] = static_cast<std::int64_t>(src);
    for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
      if (++ix[i] < od[i]) break;
      ix[i] = 0;
    }
  }
  return index;
}

template <class T>
Var<T> permute(const Var<T>& x, std::initializer_list<std::size_t> perm) {
  Shape out;
  const std::vector<std::size_t> p(perm);
  auto index = permute_index(x.shape(), p, &out);
  return gather_rows(x, 1, std::move(index), out);
}

/// Min-max normalisation to [0, 1]. With `per_sample`, each slice along the
/// leading dimension is normalised on its own. A (numerically) constant
/// slice maps to 0.5 everywhere with zero gradient.
template <class T>
Var<T> minmax_normalize(const Var<T>& x, bool per_sample = true) {
  const std::size_t samples = (per_sample && x.shape().rank() > 1) ? x.shape()[0] : 1;
  const std::size_t n = x.size() / samples;
  const Var<T> rows = reshape(x, Shape{samples, n});
  auto lo_idx = std::make_shared<Index>(samples);
  auto hi_idx = std::make_shared<Index>(samples);
  std::vector<std::uint8_t> flat(samples, 0);
  const auto& v = rows.value();
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t lo = 0;
    std::size_t hi = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (v[s * n + j] < v[s * n + lo]) lo = j;
      if (v[s * n + j] > v[s * n + hi]) hi = j;
    }
    (*lo_idx)[s] = static_cast<std::int64_t>(s * n + lo);
    (*hi_idx)[s] = static_cast<std::int64_t>(s * n + hi);
    const double a = v[s * n + lo];
    const double b = v[s * n + hi];
    const double tol = 1024.0 * std::numeric_limits<T>::epsilon() * std::max({1.0, std::abs(a), std::abs(b)});
    flat[s] = (b - a) <= tol ? 1 : 0;
  }
  const Var<T> mins = gather_rows(rows, 1, lo_idx, Shape{samples, 1});
  const Var<T> maxs = gather_rows(rows, 1, hi_idx, Shape{samples, 1});
  // Flat rows get range 1 and are replaced by 0.5 through a constant mask.
  Tensor<T> keep(Shape{samples, 1});
  Tensor<T> fill(Shape{samples, 1});
  for (std::size_t s = 0; s < samples; ++s) {
    keep[s] = flat[s] ? T(0) : T(1);
    fill[s] = flat[s] ? T(0.5) : T(0);
  }
  const Var<T> keep_v = Var<T>::constant(keep);
  const Var<T> range = add(mul(sub(maxs, mins), keep_v), add_scalar(neg(keep_v), 1.0));
  const Var<T> normed = mul(mul(sub(rows, mins), reciprocal(range)), keep_v);
  return reshape(add(normed, Var<T>::constant(fill)), x.shape());
}

}  // namespace maskgen
