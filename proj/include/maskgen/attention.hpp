// SPDX-License-Identifier: Apache-2.0
//
// Multi-head scaled dot-product attention assembled from the recorded
// primitives. Shared by the coarse global attention and the fine window
// attention.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "maskgen/numerics.hpp"

namespace maskgen {

/// [G, T, C] -> [G, heads, T, C / heads]
template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const std::size_t g = x.shape()[0], t = x.shape()[1], c = x.shape()[2];
  if (c % heads != 0) throw DimensionError("channels " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
  return permute(reshape(x, Shape{g, t, heads, c / heads}), {0, 2, 1, 3});
}

/// [G, heads, T, d] -> [G, T, heads * d]
template <class T>
Var<T> merge_heads(const Var<T>& x) {
  const std::size_t g = x.shape()[0], h = x.shape()[1], t = x.shape()[2], d = x.shape()[3];
  return reshape(permute(x, {0, 2, 1, 3}), Shape{g, t, h * d});
}

template <class T>
struct AttentionTerms {
  /// Additive logit bias broadcastable to [G, heads, T, T].
  const Var<T>* bias = nullptr;
  /// Multiplicative logit modulation broadcastable to [G, heads, T, T],
  /// applied after the bias.
  const Var<T>* pairwise = nullptr;
  /// [G, T] key validity; zero entries receive no attention weight.
  std::span<const std::uint8_t> key_mask;
  /// When set, receives the attention weights as [G, heads, T, T].
  Var<T>* weights_out = nullptr;
};

/// softmax((Q K^T) / sqrt(d) + bias) * pairwise) V, per head, over
/// already-projected q, k, v of shape [G, T, C]. Returns [G, T, C].
template <class T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                            const AttentionTerms<T>& terms = {}) {
  const std::size_t c = q.shape()[2];
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c / heads));
  const Var<T> qh = scale(split_heads(q, heads), inv_sqrt_d);
  Var<T> logits = matmul(qh, split_heads(k, heads), /*transpose_b=*/true);
  if (terms.bias) logits = add(logits, *terms.bias);
  if (terms.pairwise) logits = mul(logits, *terms.pairwise);
  std::span<const std::uint8_t> mask;
  if (!terms.key_mask.empty()) {
    // The softmax mask is keyed by the leading extent; expand G to G * heads
    // by viewing the logits as [G, heads * T, T].
    const auto& s = logits.shape();
    logits = reshape(logits, Shape{s[0], s[1] * s[2], s[3]});
    mask = terms.key_mask;
  }
  Var<T> weights = softmax_lastdim(logits, mask);
  const auto& vs = v.shape();
  weights = reshape(weights, Shape{vs[0], heads, vs[1], vs[1]});
  if (terms.weights_out) *terms.weights_out = weights;
  return merge_heads(matmul(weights, split_heads(v, heads)));
}

}  // namespace maskgen
