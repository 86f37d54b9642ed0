// SPDX-License-Identifier: Apache-2.0
//
// Fine stage: the coarse features and mask are upsampled, refined by a small
// convolution and pushed through two passes of mask-guided window attention
// (plain, then cyclically shifted). Channel norms of the result are
// thresholded into the fine mask.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgen/attention.hpp"
#include "maskgen/coarse_stage.hpp"
#include "maskgen/numerics.hpp"

namespace maskgen {

struct WindowSpec {
  std::size_t size = 6;
  std::size_t shift = 0;

  void validate() const {
    if (size < 1) throw std::invalid_argument("window size must be at least 1");
    if (shift >= size) throw std::invalid_argument("window shift must be smaller than the window");
  }
  /// The shift used by the second pass of a block.
  std::size_t half_shift() const { return size / 2; }
};

/// Geometry of a partitioned B x H x W grid.
struct WindowLayout {
  std::size_t batch = 0, height = 0, width = 0, window = 0;
  std::size_t padded_height = 0, padded_width = 0;
  /// One entry per windowed token; 0 marks padding.
  std::vector<std::uint8_t> valid;

  std::size_t windows_y() const { return padded_height / window; }
  std::size_t windows_x() const { return padded_width / window; }
  std::size_t windows_per_image() const { return windows_y() * windows_x(); }
  std::size_t window_count() const { return batch * windows_per_image(); }
  std::size_t tokens_per_window() const { return window * window; }

  static WindowLayout make(std::size_t batch, std::size_t height, std::size_t width, std::size_t window) {
    if (window < 1) throw std::invalid_argument("window size must be at least 1");
    WindowLayout l;
    l.batch = batch;
    l.height = height;
    l.width = width;
    l.window = window;
    l.padded_height = (height + window - 1) / window * window;
    l.padded_width = (width + window - 1) / window * window;
    l.valid.assign(l.window_count() * l.tokens_per_window(), 0);
    const auto src = l.source_index();
    for (std::size_t i = 0; i < src->size(); ++i) l.valid[i] = (*src)[i] >= 0;
    return l;
  }

  /// For each windowed token, its row in the B x H x W grid (-1 for padding).
  /// Windows are ordered batch-major, then row-major across the grid.
  IndexPtr source_index() const {
    auto index = std::make_shared<Index>(window_count() * tokens_per_window());
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t wy = 0; wy < windows_y(); ++wy)
        for (std::size_t wx = 0; wx < windows_x(); ++wx)
          for (std::size_t y = wy * window; y < (wy + 1) * window; ++y)
            for (std::size_t x = wx * window; x < (wx + 1) * window; ++x, ++o) {
              (*index)[o] = (y < height && x < width) ? static_cast<std::int64_t>((b * height + y) * width + x) : -1;
            }
    return index;
  }

  /// For each grid token, its row in the windowed layout.
  IndexPtr reverse_index() const {
    const auto src = source_index();
    auto index = std::make_shared<Index>(batch * height * width);
    for (std::size_t i = 0; i < src->size(); ++i) {
      if ((*src)[i] >= 0) (*index)[static_cast<std::size_t>((*src)[i])] = static_cast<std::int64_t>(i);
    }
    return index;
  }
};

template <class T>
struct Windows {
  Var<T> tokens;  // G x ws*ws x C
  WindowLayout layout;
};

/// Splits a B x H x W x C grid into zero-padded ws x ws windows.
template <class T>
Windows<T> window_partition(const Var<T>& grid, std::size_t window) {
  const Shape& s = grid.shape();
  if (s.rank() != 4) throw DimensionError("window_partition expects B x H x W x C tokens");
  Windows<T> w{Var<T>{}, WindowLayout::make(s[0], s[1], s[2], window)};
  const std::size_t g = w.layout.window_count(), t = w.layout.tokens_per_window();
  w.tokens = gather_rows(grid, s[3], w.layout.source_index(), Shape{g, t, s[3]});
  return w;
}

/// Inverse of window_partition: crops the padding and restores B x H x W x C.
template <class T>
Var<T> window_reverse(const Var<T>& windows, const WindowLayout& layout) {
  const std::size_t c = windows.shape().back();
  if (windows.size() != layout.window_count() * layout.tokens_per_window() * c) {
    throw DimensionError("windows " + windows.shape().to_string() + " do not match the layout");
  }
  return gather_rows(windows, c, layout.reverse_index(), Shape{layout.batch, layout.height, layout.width, c});
}

/// Toroidal roll of a B x H x W x C grid: out[y, x] = in[y - shift, x - shift].
template <class T>
Var<T> cyclic_shift(const Var<T>& grid, std::int64_t shift) {
  const Shape& s = grid.shape();
  if (s.rank() != 4) throw DimensionError("cyclic_shift expects B x H x W x C tokens");
  const auto h = static_cast<std::int64_t>(s[1]), w = static_cast<std::int64_t>(s[2]);
  if (std::abs(shift) >= std::min(h, w)) throw std::invalid_argument("cyclic shift must be smaller than the grid");
  if (shift == 0) return grid;
  auto index = std::make_shared<Index>(s[0] * s[1] * s[2]);
  std::size_t o = 0;
  for (std::int64_t b = 0; b < static_cast<std::int64_t>(s[0]); ++b)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x, ++o) {
        const std::int64_t sy = ((y - shift) % h + h) % h;
        const std::int64_t sx = ((x - shift) % w + w) % w;
        (*index)[o] = (b * h + sy) * w + sx;
      }
  return gather_rows(grid, s[3], index, s);
}

enum class PairwiseMode { outer_product, off };

/// Window attention with coarse-mask modulation of keys, values and logits.
template <class T>
struct SparseAttnParams {
  Var<T> w_q, w_k, w_v;  // [C, C]
  Var<T> bias_table;     // [heads, (2ws-1)^2]
  Var<T> alpha_scale;    // [1]
  std::size_t heads = 8;
  std::size_t window = 6;
  PairwiseMode pairwise = PairwiseMode::outer_product;

  std::size_t channels() const { return w_q.shape()[0]; }

  static SparseAttnParams init(std::size_t channels, std::size_t heads, std::size_t window, Rng& rng,
                               PairwiseMode pairwise = PairwiseMode::outer_product) {
    if (heads == 0 || channels % heads != 0) throw DimensionError("channels must be divisible by heads");
    SparseAttnParams p;
    auto proj = [&] { return Var<T>::constant(rng.uniform_tensor<T>(Shape{channels, channels}, -0.02, 0.02)); };
    p.w_q = proj();
    p.w_k = proj();
    p.w_v = proj();
    const std::size_t span = 2 * window - 1;
    p.bias_table = Var<T>::constant(Tensor<T>(Shape{heads, span * span}));
    p.alpha_scale = Var<T>::constant(Tensor<T>(Shape{1}, T(1)));
    p.heads = heads;
    p.window = window;
    p.pairwise = pairwise;
    return p;
  }

  /// Per-head bias for every (query, key) pair of a window: [heads, T, T].
  Var<T> relative_bias() const {
    const std::size_t ws = window, t = ws * ws, span = 2 * ws - 1;
    if (bias_table.shape() != Shape{heads, span * span}) throw DimensionError("bias table does not match the window");
    auto index = std::make_shared<Index>(heads * t * t);
    std::size_t o = 0;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j, ++o) {
          const std::size_t dy = i / ws + ws - 1 - j / ws;
          const std::size_t dx = i % ws + ws - 1 - j % ws;
          (*index)[o] = static_cast<std::int64_t>(h * span * span + dy * span + dx);
        }
    return gather_rows(reshape(bias_table, Shape{heads * span * span}), 1, index, Shape{heads, t, t});
  }
};

/// x_j * (1 + alpha * m_j) for G x T x C rows and a G x T mask.
template <class T>
Var<T> mask_modulate(const Var<T>& x, const Var<T>& mask, const Var<T>& alpha) {
  const Shape& s = x.shape();
  return mul(x, add_scalar(mul(reshape(mask, Shape{s[0], s[1], 1}), alpha), 1.0));
}

/// Attention inside each window. `tokens` is G x T x C, `mask` holds the soft
/// token mask (G x T, values in [0, 1]) and `valid` flags real tokens
/// (G * T entries, empty when every token is real).
///
/// Keys and values are scaled by (1 + alpha * m), logits get the relative
/// bias and are multiplied by clamp(m_i * m_j, 0, 1) in outer-product mode.
template <class T>
Var<T> sparse_window_attention(const Var<T>& tokens, const Var<T>& mask, const SparseAttnParams<T>& params,
                               std::span<const std::uint8_t> valid = {}, Var<T>* weights_out = nullptr) {
  const Shape& s = tokens.shape();
  if (s.rank() != 3) throw DimensionError("window tokens must be G x T x C");
  const std::size_t g = s[0], t = s[1];
  if (mask.shape() != Shape{g, t}) {
    throw DimensionError("token mask " + mask.shape().to_string() + " does not match tokens " + s.to_string());
  }
  if (!valid.empty() && valid.size() != g * t) throw DimensionError("validity mask length mismatch");
  if (t != params.window * params.window) throw DimensionError("tokens per window do not match the window size");

  const Var<T> q = matmul(tokens, params.w_q);
  const Var<T> k = mask_modulate(matmul(tokens, params.w_k), mask, params.alpha_scale);
  const Var<T> v = mask_modulate(matmul(tokens, params.w_v), mask, params.alpha_scale);
  const Var<T> bias = params.relative_bias();
  AttentionTerms<T> terms;
  terms.bias = &bias;
  terms.key_mask = valid;
  terms.weights_out = weights_out;
  Var<T> pair;
  if (params.pairwise == PairwiseMode::outer_product) {
    pair = clamp(mul(reshape(mask, Shape{g, 1, t, 1}), reshape(mask, Shape{g, 1, 1, t})), 0.0, 1.0);
    terms.pairwise = &pair;
  }
  return scaled_dot_attention(q, k, v, params.heads, terms);
}

/// LayerNorm followed by a two-layer GELU perceptron.
template <class T>
struct MlpParams {
  Var<T> norm_gain, norm_bias;  // [C]
  Var<T> fc1, fc1_bias;         // [C, rC], [rC]
  Var<T> fc2, fc2_bias;         // [rC, C], [C]

  static MlpParams init(std::size_t channels, Rng& rng, std::size_t ratio = 4) {
    MlpParams p;
    p.norm_gain = Var<T>::constant(Tensor<T>(Shape{channels}, T(1)));
    p.norm_bias = Var<T>::constant(Tensor<T>(Shape{channels}));
    p.fc1 = Var<T>::constant(rng.uniform_tensor<T>(Shape{channels, ratio * channels}, -0.02, 0.02));
    p.fc1_bias = Var<T>::constant(Tensor<T>(Shape{ratio * channels}));
    p.fc2 = Var<T>::constant(Tensor<T>(Shape{ratio * channels, channels}));
    p.fc2_bias = Var<T>::constant(Tensor<T>(Shape{channels}));
    return p;
  }

  /// x is N x C (or any rank with channels last).
  Var<T> operator()(const Var<T>& x) const {
    const Var<T> normed = add(mul(layer_norm_lastdim(x), norm_gain), norm_bias);
    return add(matmul(gelu(add(matmul(normed, fc1), fc1_bias)), fc2), fc2_bias);
  }
};

/// One attention pass of the block and its residual perceptron.
template <class T>
struct PassParams {
  SparseAttnParams<T> attention;
  MlpParams<T> mlp;
};

template <class T>
struct SwinBlockParams {
  std::array<PassParams<T>, 2> passes;  // unshifted, shifted

  static SwinBlockParams init(std::size_t channels, std::size_t heads, std::size_t window, Rng& rng,
                              PairwiseMode pairwise = PairwiseMode::outer_product) {
    SwinBlockParams p;
    for (auto& pass : p.passes) {
      pass.attention = SparseAttnParams<T>::init(channels, heads, window, rng, pairwise);
      pass.mlp = MlpParams<T>::init(channels, rng);
    }
    return p;
  }
};

/// Window attention over a rolled grid, unrolled afterwards, then
/// X = MLP(LN(X)) + X.
template <class T>
Var<T> swin_pass(const Var<T>& tokens, const Var<T>& mask, const PassParams<T>& params, std::size_t shift) {
  const Shape& s = tokens.shape();
  const auto roll = static_cast<std::int64_t>(shift);
  const Var<T> x = cyclic_shift(tokens, -roll);
  const Var<T> m = cyclic_shift(reshape(mask, Shape{s[0], s[1], s[2], 1}), -roll);
  const std::size_t window = params.attention.window;
  const Windows<T> xw = window_partition(x, window);
  const Windows<T> mw = window_partition(m, window);
  const std::size_t g = xw.layout.window_count(), t = xw.layout.tokens_per_window();
  const Var<T> attended = sparse_window_attention(xw.tokens, reshape(mw.tokens, Shape{g, t}), params.attention,
                                                  std::span<const std::uint8_t>(xw.layout.valid));
  const Var<T> merged = cyclic_shift(window_reverse(attended, xw.layout), roll);
  return add(params.mlp(merged), merged);
}

/// Unshifted pass followed by a pass shifted by half a window. `tokens` is
/// B x H x W x C and `mask` B x H x W.
template <class T>
Var<T> refined_swin_block(const Var<T>& tokens, const Var<T>& mask, const SwinBlockParams<T>& params) {
  const Shape& s = tokens.shape();
  if (s.rank() != 4) throw DimensionError("refined_swin_block expects B x H x W x C tokens");
  if (mask.shape() != Shape{s[0], s[1], s[2]}) {
    throw DimensionError("sparse mask " + mask.shape().to_string() + " does not match the token grid");
  }
  const WindowSpec spec{params.passes[0].attention.window, 0};
  spec.validate();
  Var<T> x = swin_pass(tokens, mask, params.passes[0], 0);
  const std::size_t shift = spec.half_shift();
  // A roll needs room on the grid; on tiny grids the second pass stays unshifted.
  const bool can_shift = shift > 0 && shift < std::min(s[1], s[2]);
  return swin_pass(x, mask, params.passes[1], can_shift ? shift : 0);
}

/// 3 x 3 same-padded convolution over a B x H x W x C grid, as nine shifted
/// channel mixes.
template <class T>
Var<T> conv3x3_tokens(const Var<T>& grid, const Var<T>& weight, const Var<T>& bias) {
  const Shape& s = grid.shape();
  const std::size_t b = s[0], h = s[1], w = s[2], c = s[3];
  if (weight.shape() != Shape{9, c, c}) throw DimensionError("refinement weight must be 9 x C x C");
  Var<T> out;
  for (std::size_t tap = 0; tap < 9; ++tap) {
    const auto dy = static_cast<std::int64_t>(tap / 3) - 1, dx = static_cast<std::int64_t>(tap % 3) - 1;
    auto index = std::make_shared<Index>(b * h * w);
    std::size_t o = 0;
    for (std::int64_t bi = 0; bi < static_cast<std::int64_t>(b); ++bi)
      for (std::int64_t y = 0; y < static_cast<std::int64_t>(h); ++y)
        for (std::int64_t x = 0; x < static_cast<std::int64_t>(w); ++x, ++o) {
          const std::int64_t sy = y + dy, sx = x + dx;
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::int64_t>(h) && sx < static_cast<std::int64_t>(w);
          (*index)[o] = inside ? (bi * static_cast<std::int64_t>(h) + sy) * static_cast<std::int64_t>(w) + sx : -1;
        }
    auto pick = std::make_shared<Index>(Index{static_cast<std::int64_t>(tap)});
    const Var<T> kernel = gather_rows(weight, c * c, pick, Shape{c, c});
    const Var<T> term = matmul(gather_rows(grid, c, index, s), kernel);
    out = out.valid() ? add(out, term) : term;
  }
  return add(out, bias);
}

template <class T>
struct FineParams {
  Var<T> refine_weight;  // [9, C, C], centre tap identity
  Var<T> refine_bias;    // [C]
  SwinBlockParams<T> block;
  ThresholdSelector<T> selector;
  std::size_t scale = 4;

  static FineParams init(std::size_t channels, std::size_t heads, std::size_t window, Rng& rng, double lambda = 10.0,
                         std::size_t scale = 4, PairwiseMode pairwise = PairwiseMode::outer_product) {
    FineParams p;
    Tensor<T> w(Shape{9, channels, channels});
    for (std::size_t i = 0; i < channels; ++i) w.at(4, i, i) = T(1);
    p.refine_weight = Var<T>::constant(std::move(w));
    p.refine_bias = Var<T>::constant(Tensor<T>(Shape{channels}));
    p.block = SwinBlockParams<T>::init(channels, heads, window, rng, pairwise);
    p.selector = ThresholdSelector<T>::init(rng, lambda);
    p.scale = scale;
    return p;
  }
};

template <class T>
struct FineOutput {
  Var<T> mask;    // M_f: B x 1 x out_h x out_w
  Var<T> tau;     // B x 1
  Var<T> scores;  // normalised channel norms, B x 1 x H_t x W_t
  Shape token_shape;
};

/// Upsample, refine, block attention, channel-norm scoring, soft threshold
/// and a final resize to the output resolution. `features` is
/// B x C x H_c x W_c and `coarse_mask` B x 1 x H_c x W_c.
template <class T>
FineOutput<T> fine_pass(const Var<T>& features, const Var<T>& coarse_mask, const FineParams<T>& params,
                        std::size_t out_h, std::size_t out_w) {
  const Shape& fs = features.shape();
  if (fs.rank() != 4) throw DimensionError("coarse features must be B x C x H x W");
  if (coarse_mask.shape() != Shape{fs[0], 1, fs[2], fs[3]}) throw DimensionError("coarse mask does not match features");
  if (out_h == 0 || out_w == 0) throw DimensionError("output resolution must be positive");
  const std::size_t b = fs[0], c = fs[1];
  const int factor = static_cast<int>(params.scale);
  const Var<T> up = permute(bilinear_upsample(features, factor), {0, 2, 3, 1});
  const std::size_t h = up.shape()[1], w = up.shape()[2];
  const Var<T> mask_up = reshape(bilinear_upsample(coarse_mask, factor), Shape{b, h, w});
  const Var<T> refined = conv3x3_tokens(up, params.refine_weight, params.refine_bias);
  const Var<T> attended = refined_swin_block(refined, mask_up, params.block);

  const Var<T> scores = minmax_normalize(reshape(l2norm_lastdim(attended), Shape{b, h * w}), true);
  FineOutput<T> out;
  out.tau = params.selector(scores);
  const Var<T> fine = reshape(soft_select(scores, out.tau, params.selector.lambda), Shape{b, 1, h, w});
  out.mask = bilinear_resize(fine, out_h, out_w);
  out.scores = reshape(scores, Shape{b, 1, h, w});
  out.token_shape = Shape{b, h, w, c};
  return out;
}

}  // namespace maskgen
