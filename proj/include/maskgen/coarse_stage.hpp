// SPDX-License-Identifier: Apache-2.0
//
// Coarse stage: multi-layer class-token attention is reduced to one fused
// importance score per patch, a learned threshold turns it into a soft
// selection gate, and the gate drives a global attention pass over the
// encoder features.
#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgen/attention.hpp"
#include "maskgen/numerics.hpp"

namespace maskgen {

/// Per-layer, per-head attention maps with a designated class-token row.
template <class T>
struct AttentionStack {
  std::vector<Tensor<T>> layers;  // each B x heads x N_tok x N_tok
  std::size_t cls_index = 0;
  std::vector<int> layer_ids;     // encoder layer each entry came from

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_tokens() const { return layers.at(0).dim(2); }
  std::size_t num_patches() const { return num_tokens() - 1; }

  /// Throws DimensionError on structural problems. Rows that are not
  /// stochastic within `tol` are reported as warnings only, so synthetic
  /// stacks stay usable.
  std::vector<std::string> validate(double tol = 1e-5) const {
    if (layers.empty()) throw DimensionError("attention stack has no layers");
    std::vector<std::string> warnings;
    const Shape& ref = layers[0].shape();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Shape& s = layers[l].shape();
      if (s.rank() != 4 || s[2] != s[3]) throw DimensionError("layer " + std::to_string(l) + " is not B x H x N x N");
      if (!(s == ref)) throw DimensionError("attention layers disagree in shape");
    }
    if (cls_index >= ref[2]) throw DimensionError("class token index outside the token range");
    const std::size_t patches = ref[2] - 1;
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
    if (side * side != patches) throw DimensionError("patch count " + std::to_string(patches) + " is not a perfect square");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t n = ref[3];
      const auto& data = layers[l].data();
      double worst = 0.0;
      for (std::size_t r = 0; r < data.size() / n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += data[r * n + j];
        worst = std::max(worst, std::abs(s - 1.0));
      }
      if (worst > tol) {
        warnings.push_back("layer " + std::to_string(l) + " rows deviate from stochastic by " + std::to_string(worst));
      }
    }
    return warnings;
  }
};

/// Head-averaged class-token attention to every other token of one layer,
/// min-max normalised per sample. Returns B x N_patches.
template <class T>
Tensor<T> extract_cls_attention(const AttentionStack<T>& stack, std::size_t layer) {
  if (layer >= stack.layers.size()) {
    throw std::out_of_range("layer " + std::to_string(layer) + " out of range for stack of " +
                            std::to_string(stack.layers.size()));
  }
  const Tensor<T>& a = stack.layers[layer];
  if (a.rank() != 4 || a.dim(2) != a.dim(3)) throw DimensionError("attention layer must be B x H x N x N");
  const std::size_t batch = a.dim(0), heads = a.dim(1), tokens = a.dim(2);
  const std::size_t cls = stack.cls_index;
  if (cls >= tokens) throw DimensionError("class token index outside the token range");
  std::vector<double> acc(batch * (tokens - 1), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* row = a.data().data() + ((b * heads + h) * tokens + cls) * tokens;
      std::size_t out = 0;
      for (std::size_t j = 0; j < tokens; ++j) {
        if (j == cls) continue;
        acc[b * (tokens - 1) + out++] += row[j];
      }
    }
  }
  Tensor<T> mean(Shape{batch, tokens - 1});
  for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<T>(acc[i] / static_cast<double>(heads));
  return minmax_normalize(Var<T>::constant(std::move(mean)), true).value();
}

/// Learnable layer-fusion logits; the fusion weights are their softmax.
template <class T>
struct LayerWeights {
  Var<T> logits;  // [L]

  static LayerWeights uniform(std::size_t layers) {
    return {Var<T>::constant(Tensor<T>(Shape{layers}, T(0)))};
  }
  std::size_t size() const { return logits.size(); }
  Var<T> weights() const { return softmax_lastdim(logits); }
};

/// Convex combination of per-layer scores with softmax-normalised weights.
template <class T>
Var<T> fuse_layers(const std::vector<Var<T>>& per_layer, const LayerWeights<T>& weights) {
  if (per_layer.empty() || per_layer.size() != weights.size()) {
    throw DimensionError("fuse_layers got " + std::to_string(per_layer.size()) + " score maps for " +
                         std::to_string(weights.size()) + " layer weights");
  }
  const Var<T> w = weights.weights();
  Var<T> fused;
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    if (!(per_layer[l].shape() == per_layer[0].shape())) throw DimensionError("per-layer scores differ in shape");
    auto pick = std::make_shared<Index>(Index{static_cast<std::int64_t>(l)});
    const Var<T> term = mul(per_layer[l], gather_rows(w, 1, pick, Shape{1}));
    fused = fused.valid() ? add(fused, term) : term;
  }
  return fused;
}

/// σ((score - τ) · λ) with a per-sample τ of shape [B, 1].
template <class T>
Var<T> soft_select(const Var<T>& scores, const Var<T>& tau, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("soft_select temperature must be positive");
  return sigmoid(scale(sub(scores, tau), lambda));
}

/// Two-layer perceptron over per-sample [mean, std, max] of a score map,
/// ending in a sigmoid so the threshold lies in (0, 1).
template <class T>
struct ThresholdSelector {
  static constexpr std::size_t kHidden = 8;

  Var<T> w1;  // [3, 8]
  Var<T> b1;  // [8]
  Var<T> w2;  // [8, 1]
  Var<T> b2;  // [1]
  double lambda = 10.0;

  static ThresholdSelector init(Rng& rng, double lambda = 10.0) {
    ThresholdSelector s;
    s.w1 = Var<T>::constant(rng.uniform_tensor<T>(Shape{3, kHidden}, -0.02, 0.02));
    s.b1 = Var<T>::constant(Tensor<T>(Shape{kHidden}));
    s.w2 = Var<T>::constant(rng.uniform_tensor<T>(Shape{kHidden, 1}, -0.02, 0.02));
    s.b2 = Var<T>::constant(Tensor<T>(Shape{1}));
    s.lambda = lambda;
    return s;
  }

  /// [B, N] scores -> [B, 3] statistics.
  static Var<T> statistics(const Var<T>& scores) {
    const std::size_t b = scores.shape()[0];
    const std::size_t n = scores.shape()[1];
    const Var<T> mean = scale(sum_lastdim(scores), 1.0 / static_cast<double>(n));
    const Var<T> centered = sub(scores, reshape(mean, Shape{b, 1}));
    const Var<T> stddev = scale(l2norm_lastdim(centered), 1.0 / std::sqrt(static_cast<double>(n)));
    auto argmax = std::make_shared<Index>(b);
    const auto& v = scores.value();
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j) {
        if (v[i * n + j] > v[i * n + best]) best = j;
      }
      (*argmax)[i] = static_cast<std::int64_t>(i * n + best);
    }
    const Var<T> maxv = gather_rows(reshape(scores, Shape{b * n}), 1, argmax, Shape{b});
    Var<T> stats;
    const Var<T>* cols[3] = {&mean, &stddev, &maxv};
    for (std::size_t k = 0; k < 3; ++k) {
      auto slot = std::make_shared<Index>(b);
      for (std::size_t i = 0; i < b; ++i) (*slot)[i] = static_cast<std::int64_t>(i * 3 + k);
      const Var<T> placed = scatter_rows(*cols[k], 1, slot, Shape{b, 3});
      stats = stats.valid() ? add(stats, placed) : placed;
    }
    return stats;
  }

  /// [B, N] scores -> [B, 1] thresholds in (0, 1).
  Var<T> operator()(const Var<T>& scores) const {
    if (scores.shape().rank() != 2) throw DimensionError("threshold selector expects B x N scores");
    const Var<T> hidden = gelu(add(matmul(statistics(scores), w1), b1));
    return sigmoid(add(matmul(hidden, w2), b2));
  }
};

enum class AlphaExpand { interp, ones };

/// Linear interpolation of the L fusion weights onto N positions, treating
/// the weights as samples at equally spaced points.
template <class T>
Var<T> expand_layer_weights(const Var<T>& weights, std::size_t n) {
  const std::size_t layers = weights.size();
  auto lo = std::make_shared<Index>(n);
  auto hi = std::make_shared<Index>(n);
  Tensor<T> w_lo(Shape{n});
  Tensor<T> w_hi(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (n == 1 || layers == 1) ? 0.0
                                             : static_cast<double>(i) * static_cast<double>(layers - 1) /
                                                   static_cast<double>(n - 1);
    std::size_t l0 = static_cast<std::size_t>(t);
    if (l0 > layers - 1) l0 = layers - 1;
    const std::size_t l1 = std::min(l0 + 1, layers - 1);
    const double f = t - static_cast<double>(l0);
    (*lo)[i] = static_cast<std::int64_t>(l0);
    (*hi)[i] = static_cast<std::int64_t>(l1);
    w_lo[i] = static_cast<T>(1.0 - f);
    w_hi[i] = static_cast<T>(f);
  }
  return add(mul(gather_rows(weights, 1, lo, Shape{n}), Var<T>::constant(std::move(w_lo))),
             mul(gather_rows(weights, 1, hi, Shape{n}), Var<T>::constant(std::move(w_hi))));
}

/// Learnable state of the coarse stage.
template <class T>
struct CoarseParams {
  LayerWeights<T> layer_weights;
  ThresholdSelector<T> selector;
  Var<T> w_q, w_k, w_v, w_o;  // [C, C] projections of the global attention
  Var<T> fuse_features;       // [C, C] 1x1 conv half applied to F (identity at init)
  Var<T> fuse_attention;      // [C, C] 1x1 conv half applied to the attention output (zero at init)
  Var<T> fuse_bias;           // [C]
  std::size_t heads = 8;
  AlphaExpand alpha_expand = AlphaExpand::interp;

  std::size_t channels() const { return w_q.shape()[0]; }

  static CoarseParams init(std::size_t channels, std::size_t layers, Rng& rng, std::size_t heads = 8,
                           double lambda = 10.0, AlphaExpand expand = AlphaExpand::interp) {
    if (channels % heads != 0) throw DimensionError("channels must be divisible by heads");
    CoarseParams p;
    p.layer_weights = LayerWeights<T>::uniform(layers);
    p.selector = ThresholdSelector<T>::init(rng, lambda);
    auto proj = [&] { return Var<T>::constant(rng.uniform_tensor<T>(Shape{channels, channels}, -0.02, 0.02)); };
    p.w_q = proj();
    p.w_k = proj();
    p.w_v = proj();
    p.w_o = proj();
    Tensor<T> eye(Shape{channels, channels});
    for (std::size_t i = 0; i < channels; ++i) eye[i * channels + i] = T(1);
    p.fuse_features = Var<T>::constant(std::move(eye));
    p.fuse_attention = Var<T>::constant(Tensor<T>(Shape{channels, channels}));
    p.fuse_bias = Var<T>::constant(Tensor<T>(Shape{channels}));
    p.heads = heads;
    p.alpha_expand = expand;
    return p;
  }
};

template <class T>
struct CoarseOutput {
  Var<T> features;      // F': B x C x H x W
  Var<T> mask;          // M_c: B x 1 x H x W
  Var<T> tau;           // B x 1
  Var<T> fused_scores;  // B x N
};

/// Guided global attention over the coarse grid.
///
/// Tokens X are the flattened features. The soft gate
/// W = σ((S - τ)·λ) ⊙ α_exp scales the keys/values KV = X ⊙ W, global
/// multi-head attention runs with Q = X and K = V = KV, the mask is the
/// per-patch gate, and a 1x1 convolution over [F, attention] yields F'.
template <class T>
CoarseOutput<T> guided_global_attention(const Var<T>& features, const Var<T>& fused, const CoarseParams<T>& params) {
  const Shape& fs = features.shape();
  if (fs.rank() != 4) throw DimensionError("coarse features must be B x C x H x W");
  const std::size_t b = fs[0], c = fs[1], h = fs[2], w = fs[3];
  const std::size_t n = h * w;
  if (fused.shape().rank() != 2 || fused.shape()[0] != b || fused.shape()[1] != n) {
    throw DimensionError("fused scores " + fused.shape().to_string() + " do not match a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  if (c != params.channels()) throw DimensionError("feature channels do not match coarse parameters");

  const Var<T> tokens = permute(reshape(features, Shape{b, c, n}), {0, 2, 1});  // [B, N, C]
  const Var<T> tau = params.selector(fused);
  Var<T> gate = soft_select(fused, tau, params.selector.lambda);
  if (params.alpha_expand == AlphaExpand::interp) {
    gate = mul(gate, expand_layer_weights(params.layer_weights.weights(), n));
  }
  const Var<T> kv = mul(tokens, reshape(gate, Shape{b, n, 1}));
  const Var<T> attended = matmul(scaled_dot_attention(matmul(tokens, params.w_q), matmul(kv, params.w_k),
                                                      matmul(kv, params.w_v), params.heads),
                                 params.w_o);
  const Var<T> fused_tokens =
      add(add(matmul(tokens, params.fuse_features), matmul(attended, params.fuse_attention)), params.fuse_bias);

  CoarseOutput<T> out;
  out.features = reshape(permute(fused_tokens, {0, 2, 1}), Shape{b, c, h, w});
  out.mask = reshape(gate, Shape{b, 1, h, w});
  out.tau = tau;
  out.fused_scores = fused;
  return out;
}

/// Full coarse pass from an attention stack and encoder features.
template <class T>
CoarseOutput<T> run_coarse_stage(const AttentionStack<T>& stack, const Var<T>& features, const CoarseParams<T>& params) {
  if (stack.num_layers() != params.layer_weights.size()) {
    throw DimensionError("stack has " + std::to_string(stack.num_layers()) + " layers, parameters expect " +
                         std::to_string(params.layer_weights.size()));
  }
  std::vector<Var<T>> scores;
  scores.reserve(stack.num_layers());
  for (std::size_t l = 0; l < stack.num_layers(); ++l) scores.push_back(Var<T>::constant(extract_cls_attention(stack, l)));
  return guided_global_attention(features, fuse_layers(scores, params.layer_weights), params);
}

}  // namespace maskgen
