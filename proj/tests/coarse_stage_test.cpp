// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "maskgen/coarse_stage.hpp"

namespace maskgen {
namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor<double> random_stack_layer(Rng& rng, std::size_t b, std::size_t heads, std::size_t tokens) {
  Tensor<double> t(Shape{b, heads, tokens, tokens});
  for (std::size_t r = 0; r < b * heads * tokens; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < tokens; ++j) s += (t[r * tokens + j] = rng.uniform(0.01, 1.0));
    for (std::size_t j = 0; j < tokens; ++j) t[r * tokens + j] /= s;
  }
  return t;
}

TEST(ExtractCls, UniformAttentionNormalizesToHalf) {
  AttentionStack<double> stack;
  stack.layers.emplace_back(Shape{1, 2, 10, 10}, 0.1);
  const auto s = extract_cls_attention(stack, 0);
  ASSERT_EQ(s.shape(), Shape({1, 9}));
  for (double v : s.data()) EXPECT_EQ(v, 0.5);
}

TEST(ExtractCls, EncoderSizedStack) {
  AttentionStack<float> stack;
  stack.layers.emplace_back(Shape{1, 12, 4097, 4097}, 1.0f / 4097.0f);
  EXPECT_EQ(extract_cls_attention(stack, 0).shape(), Shape({1, 4096}));
}

TEST(ExtractCls, MatchesSliceAndAverageLoop) {
  Rng rng(11);
  AttentionStack<double> stack;
  stack.layers.push_back(random_stack_layer(rng, 2, 2, 10));
  stack.cls_index = 3;
  const auto got = extract_cls_attention(stack, 0);
  const auto& a = stack.layers[0];
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> row;
    for (std::size_t j = 0; j < 10; ++j) {
      if (j != 3) row.push_back((a.at(b, 0, 3, j) + a.at(b, 1, 3, j)) / 2.0);
    }
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(got.at(b, j), (row[j] - *lo) / (*hi - *lo), 1e-12);
  }
  EXPECT_THROW(extract_cls_attention(stack, 1), std::out_of_range);
}

TEST(ExtractCls, HeadPermutationInvariant) {
  Rng rng(12);
  AttentionStack<double> stack;
  stack.layers.push_back(random_stack_layer(rng, 1, 4, 17));
  AttentionStack<double> permuted = stack;
  const std::size_t order[4] = {2, 0, 3, 1};
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t i = 0; i < 17; ++i)
      for (std::size_t j = 0; j < 17; ++j) permuted.layers[0].at(0, h, i, j) = stack.layers[0].at(0, order[h], i, j);
  const auto a = extract_cls_attention(stack, 0);
  const auto b = extract_cls_attention(permuted, 0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(AttentionStackValidation, WarnsOnNonStochasticRows) {
  AttentionStack<double> stack;
  stack.layers.emplace_back(Shape{1, 1, 5, 5}, 0.2);
  EXPECT_TRUE(stack.validate().empty());
  stack.layers[0][0] = 0.3;
  EXPECT_EQ(stack.validate().size(), 1u);
  stack.layers.emplace_back(Shape{1, 1, 6, 6}, 1.0 / 6);
  EXPECT_THROW(stack.validate(), DimensionError);
  AttentionStack<double> odd;
  odd.layers.emplace_back(Shape{1, 1, 6, 6}, 1.0 / 6);
  EXPECT_THROW(odd.validate(), DimensionError);
}

TEST(FuseLayers, EqualLogitsGiveEqualWeights) {
  const auto w = LayerWeights<double>::uniform(4).weights().value();
  for (double v : w.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(FuseLayers, IdenticalLayersPassThrough) {
  Rng rng(13);
  const auto s = Var<double>::constant(rng.uniform_tensor<double>(Shape{2, 9}, 0, 1));
  LayerWeights<double> w{Var<double>::constant(rng.normal_tensor<double>(Shape{4}, 3.0))};
  const auto fused = fuse_layers<double>({s, s, s, s}, w).value();
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused[i], s.value()[i], 1e-15);
  EXPECT_THROW(fuse_layers<double>({s, s}, w), DimensionError);
}

TEST(FuseLayers, StaysWithinLayerRange) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Var<double>> layers;
    for (int l = 0; l < 4; ++l) layers.push_back(Var<double>::constant(rng.uniform_tensor<double>(Shape{1, 16}, 0, 1)));
    LayerWeights<double> w{Var<double>::constant(rng.normal_tensor<double>(Shape{4}, 2.0))};
    const auto derived = w.weights().value();
    EXPECT_NEAR(std::accumulate(derived.data().begin(), derived.data().end(), 0.0), 1.0, 1e-9);
    const auto fused = fuse_layers(layers, w).value();
    for (std::size_t i = 0; i < 16; ++i) {
      double lo = 1e9, hi = -1e9;
      for (const auto& l : layers) {
        lo = std::min(lo, l.value()[i]);
        hi = std::max(hi, l.value()[i]);
      }
      EXPECT_GE(fused[i], lo - 1e-15);
      EXPECT_LE(fused[i], hi + 1e-15);
    }
  }
}

TEST(SoftSelect, FormulaValues) {
  auto one = [](double s, double tau, double lambda) {
    return soft_select(Var<double>::constant(Tensor<double>(Shape{1, 1}, s)),
                       Var<double>::constant(Tensor<double>(Shape{1, 1}, tau)), lambda)
        .item();
  };
  EXPECT_EQ(one(0.4, 0.4, 10.0), 0.5);
  EXPECT_NEAR(one(0.7, 0.5, 10.0), 0.8807970779778823, 1e-15);
  EXPECT_GE(one(0.51, 0.5, 1000.0), 0.9999);
  EXPECT_THROW(one(0.5, 0.5, 0.0), std::invalid_argument);
  EXPECT_THROW(one(0.5, 0.5, -1.0), std::invalid_argument);
}

TEST(SoftSelect, MonotoneInScores) {
  Rng rng(15);
  const auto scores = rng.uniform_tensor<double>(Shape{1, 10000}, -1, 2);
  const auto tau = Var<double>::constant(Tensor<double>(Shape{1, 1}, 0.4));
  const auto gate = soft_select(Var<double>::constant(scores), tau, 10.0).value();
  for (std::size_t i = 0; i + 1 < scores.size(); ++i) {
    const std::size_t a = i, b = i + 1;
    if (scores[a] > scores[b]) EXPECT_GE(gate[a], gate[b]);
    if (scores[b] > scores[a]) EXPECT_GE(gate[b], gate[a]);
    EXPECT_GE(gate[a], 0.0);
    EXPECT_LE(gate[a], 1.0);
  }
}

TEST(ThresholdSelector, OutputInUnitIntervalNearHalf) {
  Rng rng(16);
  const auto sel = ThresholdSelector<double>::init(rng);
  const auto tau = sel(Var<double>::constant(rng.uniform_tensor<double>(Shape{3, 20}, 0, 1))).value();
  ASSERT_EQ(tau.shape(), Shape({3, 1}));
  for (double t : tau.data()) {
    EXPECT_GT(t, 0.0);
    EXPECT_LT(t, 1.0);
    EXPECT_NEAR(t, 0.5, 0.01);
  }
}

TEST(ExpandLayerWeights, InterpolatesEndpoints) {
  const auto w = Var<double>::constant(Tensor<double>(Shape{4}, {0.1, 0.2, 0.3, 0.4}));
  const auto e = expand_layer_weights(w, 7).value();
  const double expect[7] = {0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4};
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(e[i], expect[i], 1e-15);
}

// Parameters large enough that every term of the computation matters.
CoarseParams<double> lively_params(std::size_t channels, std::size_t heads, Rng& rng) {
  auto p = CoarseParams<double>::init(channels, 4, rng, heads);
  auto randomize = [&](Var<double>& v, double sd) { v = Var<double>::constant(rng.normal_tensor<double>(v.shape(), sd)); };
  randomize(p.layer_weights.logits, 1.0);
  randomize(p.selector.w1, 0.8);
  randomize(p.selector.b1, 0.3);
  randomize(p.selector.w2, 0.8);
  randomize(p.selector.b2, 0.3);
  for (auto* v : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.fuse_features, &p.fuse_attention}) randomize(*v, 0.7);
  randomize(p.fuse_bias, 0.2);
  return p;
}

struct LoopCoarse {
  std::vector<double> features;  // C x N
  std::vector<double> mask;      // N
  double tau;
};

// Explicit loops over the published control flow, no tape involved.
LoopCoarse loop_coarse(const Tensor<double>& f, std::span<const double> s, const CoarseParams<double>& p) {
  const std::size_t c = f.dim(1), n = f.dim(2) * f.dim(3), heads = p.heads, hd = c / heads;
  auto m = [](const Var<double>& v, std::size_t i, std::size_t j) { return v.value()[i * v.shape()[1] + j]; };

  double mean = 0, var = 0, mx = s[0];
  for (double v : s) mean += v, mx = std::max(mx, v);
  mean /= static_cast<double>(n);
  for (double v : s) var += (v - mean) * (v - mean);
  const double stats[3] = {mean, std::sqrt(var / static_cast<double>(n)), mx};
  double logit = p.selector.b2.value()[0];
  for (std::size_t k = 0; k < 8; ++k) {
    double z = p.selector.b1.value()[k];
    for (std::size_t i = 0; i < 3; ++i) z += stats[i] * m(p.selector.w1, i, k);
    logit += z * sig(1.702 * z) * m(p.selector.w2, k, 0);
  }
  const double tau = sig(logit);

  const auto& lg = p.layer_weights.logits.value();
  double z = 0;
  for (double v : lg.data()) z += std::exp(v);
  std::vector<double> alpha;
  for (double v : lg.data()) alpha.push_back(std::exp(v) / z);
  std::vector<double> gate(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * 3.0 / static_cast<double>(n - 1);
    const std::size_t l0 = std::min<std::size_t>(static_cast<std::size_t>(t), 3), l1 = std::min<std::size_t>(l0 + 1, 3);
    const double a = alpha[l0] * (1 - (t - l0)) + alpha[l1] * (t - l0);
    gate[i] = sig((s[i] - tau) * p.selector.lambda) * a;
  }

  std::vector<double> x(n * c), q(n * c, 0), k(n * c, 0), v(n * c, 0), o(n * c, 0), att(n * c, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) x[i * c + ch] = f[ch * n + i];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) {
        q[i * c + b] += x[i * c + a] * m(p.w_q, a, b);
        k[i * c + b] += x[i * c + a] * gate[i] * m(p.w_k, a, b);
        v[i * c + b] += x[i * c + a] * gate[i] * m(p.w_v, a, b);
      }
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> l(n);
      double lmax = -1e300, sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        l[j] = 0;
        for (std::size_t d = h * hd; d < (h + 1) * hd; ++d) l[j] += q[i * c + d] * k[j * c + d];
        l[j] /= std::sqrt(static_cast<double>(hd));
        lmax = std::max(lmax, l[j]);
      }
      for (auto& e : l) sum += (e = std::exp(e - lmax));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t d = h * hd; d < (h + 1) * hd; ++d) o[i * c + d] += l[j] / sum * v[j * c + d];
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) att[i * c + b] += o[i * c + a] * m(p.w_o, a, b);

  LoopCoarse out{std::vector<double>(c * n), gate, tau};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < c; ++b) {
      double acc = p.fuse_bias.value()[b];
      for (std::size_t a = 0; a < c; ++a) acc += x[i * c + a] * m(p.fuse_features, a, b) + att[i * c + a] * m(p.fuse_attention, a, b);
      out.features[b * n + i] = acc;
    }
  return out;
}

TEST(GuidedGlobalAttention, MatchesLoopOracleOnTwoByTwoGrid) {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const auto params = lively_params(4, 2, rng);
    const auto f = rng.normal_tensor<double>(Shape{1, 4, 2, 2});
    const auto s = rng.uniform_tensor<double>(Shape{1, 4}, 0, 1);
    const auto got = guided_global_attention(Var<double>::constant(f), Var<double>::constant(s), params);
    const auto want = loop_coarse(f, s.data(), params);
    ASSERT_EQ(got.features.shape(), Shape({1, 4, 2, 2}));
    ASSERT_EQ(got.mask.shape(), Shape({1, 1, 2, 2}));
    EXPECT_NEAR(got.tau.item(), want.tau, 1e-10);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(got.features.value()[i], want.features[i], 1e-10);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got.mask.value()[i], want.mask[i], 1e-10);
  }
}

TEST(GuidedGlobalAttention, StartsAsIdentityOnFeatures) {
  Rng rng(18);
  const auto params = CoarseParams<double>::init(8, 4, rng);
  const auto f = rng.normal_tensor<double>(Shape{2, 8, 3, 3});
  const auto out = guided_global_attention(Var<double>::constant(f),
                                           Var<double>::constant(rng.uniform_tensor<double>(Shape{2, 9}, 0, 1)), params);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out.features.value()[i], f[i], 1e-15);
}

TEST(GuidedGlobalAttention, ZeroGateGivesZeroMaskAndConstantAttention) {
  Rng rng(19);
  auto params = lively_params(4, 2, rng);
  params.selector.b2 = Var<double>::constant(Tensor<double>(Shape{1}, 50.0));  // τ ≈ 1
  params.selector.lambda = 1e4;
  params.fuse_features = Var<double>::constant(Tensor<double>(Shape{4, 4}));
  params.fuse_bias = Var<double>::constant(Tensor<double>(Shape{4}));
  const auto f = rng.normal_tensor<double>(Shape{1, 4, 3, 3});
  const auto out = guided_global_attention(Var<double>::constant(f),
                                           Var<double>::constant(Tensor<double>(Shape{1, 9}, 0.2)), params);
  for (double v : out.mask.value().data()) EXPECT_EQ(v, 0.0);
  // KV is zero so every query reads the same (zero) values.
  for (double v : out.features.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(GuidedGlobalAttention, MaskStaysInUnitInterval) {
  Rng rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    auto params = lively_params(4, 2, rng);
    params.selector.lambda = rng.uniform(0.1, 100.0);
    const auto out = guided_global_attention(Var<double>::constant(rng.normal_tensor<double>(Shape{1, 4, 4, 4})),
                                             Var<double>::constant(rng.uniform_tensor<double>(Shape{1, 16}, 0, 1)), params);
    for (double v : out.mask.value().data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(GuidedGlobalAttention, RejectsGridMismatch) {
  Rng rng(21);
  const auto params = CoarseParams<double>::init(8, 4, rng);
  EXPECT_THROW(guided_global_attention(Var<double>::constant(Tensor<double>(Shape{1, 8, 3, 3})),
                                       Var<double>::constant(Tensor<double>(Shape{1, 8})), params),
               DimensionError);
}

TEST(GuidedGlobalAttention, EncoderShapes) {
  Rng rng(22);
  const auto params = CoarseParams<float>::init(256, 4, rng);
  const auto out = guided_global_attention(Var<float>::constant(rng.normal_tensor<float>(Shape{1, 256, 64, 64})),
                                           Var<float>::constant(rng.uniform_tensor<float>(Shape{1, 4096}, 0, 1)), params);
  EXPECT_EQ(out.features.shape(), Shape({1, 256, 64, 64}));
  EXPECT_EQ(out.mask.shape(), Shape({1, 1, 64, 64}));
  EXPECT_EQ(out.tau.shape(), Shape({1, 1}));
}

TEST(GuidedGlobalAttention, GradientsWithRespectToFeaturesAndScores) {
  Rng rng(23);
  const auto params = lively_params(4, 2, rng);
  const auto f = rng.normal_tensor<double>(Shape{1, 4, 3, 3});
  const auto s = rng.uniform_tensor<double>(Shape{1, 9}, 0, 1);
  auto objective = [&](const Var<double>& feats, const Var<double>& scores) {
    const auto out = guided_global_attention(feats, scores, params);
    return add(sum_all(out.mask), sum_all(out.features));
  };
  const auto wrt_f = grad_check([&](const Var<double>& v) { return objective(v, Var<double>::constant(s)); }, f);
  EXPECT_LE(wrt_f.max_rel_error, 1e-4);
  const auto wrt_s = grad_check([&](const Var<double>& v) { return objective(Var<double>::constant(f), v); }, s);
  EXPECT_LE(wrt_s.max_rel_error, 1e-4);
}

TEST(RunCoarseStage, PlantedAttentionRaisesMask) {
  Rng rng(24);
  AttentionStack<double> stack;
  for (int l = 0; l < 4; ++l) {
    Tensor<double> a(Shape{1, 2, 17, 17}, 1.0 / 17);
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t j = 0; j < 17; ++j) a.at(0, h, 0, j) = (j == 6 || j == 7) ? 0.3 : 0.4 / 15;
    }
    stack.layers.push_back(a);
  }
  const auto params = CoarseParams<double>::init(8, 4, rng);
  const auto out = run_coarse_stage(stack, Var<double>::constant(rng.normal_tensor<double>(Shape{1, 8, 4, 4})), params);
  const auto& m = out.mask.value();
  for (std::size_t i = 0; i < 16; ++i) {
    if (i != 5 && i != 6) EXPECT_GT(m[5], m[i]);
  }
}

}  // namespace
}  // namespace maskgen
