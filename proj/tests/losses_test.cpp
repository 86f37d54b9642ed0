// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "maskgen/losses.hpp"

namespace maskgen {
namespace {

Var<double> cst(Tensor<double> t) { return Var<double>::constant(std::move(t)); }

Tensor<double> binary(Rng& rng, Shape s) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  return t;
}

TEST(FocalLoss, PerfectPredictionIsNearZero) {
  const Tensor<double> target(Shape{2, 2}, {1, 0, 0, 1});
  EXPECT_LE(focal_loss(cst(target), target).item(), 1e-5);
}

TEST(FocalLoss, SinglePositivePixel) {
  const Tensor<double> target(Shape{1}, {1.0});
  const double got = focal_loss(cst(Tensor<double>(Shape{1}, {0.3})), target).item();
  EXPECT_NEAR(got, 0.25 * 0.49 * -std::log(0.3), 1e-15);
  EXPECT_NEAR(got, 0.14748666, 1e-8);
}

TEST(FocalLoss, ReducesToHalfBce) {
  Rng rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pred = cst(rng.uniform_tensor<double>(Shape{4, 5}, 0.01, 0.99));
    const auto target = binary(rng, Shape{4, 5});
    const double focal = focal_loss(pred, target, FocalOptions{0.0, 0.5, 1e-7}).item();
    EXPECT_NEAR(focal, 0.5 * bce_loss(pred, target).item(), 1e-12);
  }
}

TEST(BceDice, IdentityMasks) {
  const Tensor<double> target(Shape{3, 3}, {1, 0, 1, 0, 0, 1, 1, 1, 0});
  EXPECT_LE(dice_loss(cst(target), target).item(), 1e-6);
  EXPECT_LE(bce_loss(cst(target), target).item(), 1e-5);
}

TEST(BceDice, HalfPredictionHalfTarget) {
  Tensor<double> target(Shape{4, 4});
  for (std::size_t i = 0; i < 8; ++i) target[i] = 1;
  const auto pred = cst(Tensor<double>(Shape{4, 4}, 0.5));
  EXPECT_NEAR(bce_loss(pred, target).item(), std::log(2.0), 1e-15);
  // 1 - (2 * 4 + 1) / (8 + 8 + 1)
  EXPECT_NEAR(dice_loss(pred, target).item(), 8.0 / 17.0, 1e-15);
  EXPECT_NEAR(bce_dice_loss(pred, target).item(), std::log(2.0) + 8.0 / 17.0, 1e-15);
}

TEST(BceDice, MatchesScalarLoop) {
  Rng rng(52);
  const auto p = rng.uniform_tensor<double>(Shape{8, 8}, 0.0, 1.0);
  const auto t = binary(rng, Shape{8, 8});
  double bce = 0, inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    const double q = std::clamp(p[i], 1e-7, 1 - 1e-7);
    bce += -(t[i] * std::log(q) + (1 - t[i]) * std::log(1 - q));
    inter += q * t[i];
    sp += q;
    st += t[i];
  }
  const double want = bce / 64 + 1 - (2 * inter + 1) / (sp + st + 1);
  EXPECT_NEAR(bce_dice_loss(cst(p), t).item(), want, 1e-10);
}

TEST(BceDice, DiceSymmetricForBinaryPredictions) {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = binary(rng, Shape{5, 5});
    const auto b = binary(rng, Shape{5, 5});
    // Clamping the prediction to [eps, 1 - eps] perturbs the sums by O(eps).
    EXPECT_NEAR(dice_loss(cst(a), b).item(), dice_loss(cst(b), a).item(), 1e-6);
  }
}

TEST(BceDice, RejectsShapeMismatch) {
  EXPECT_THROW(bce_dice_loss(cst(Tensor<double>(Shape{2, 2})), Tensor<double>(Shape{4})), DimensionError);
  EXPECT_THROW(focal_loss(cst(Tensor<double>(Shape{2, 2})), Tensor<double>(Shape{2, 3})), DimensionError);
}

TEST(LabelSmoothing, ConfidentCorrectLogitsGiveZero) {
  Tensor<double> logits(Shape{1, 3, 1, 2});
  logits.at(0, 1, 0, 0) = 100;
  logits.at(0, 2, 0, 1) = 100;
  const std::vector<std::int64_t> labels{1, 2};
  EXPECT_LE(ce_label_smoothing(cst(logits), labels, SmoothingOptions{0.0, 255}).item(), 1e-12);
}

TEST(LabelSmoothing, UniformLogitsGiveLogK) {
  const std::vector<std::int64_t> labels{0, 3, 1, 2};
  for (double eps : {0.0, 0.1, 0.5}) {
    EXPECT_NEAR(ce_label_smoothing(cst(Tensor<double>(Shape{1, 5, 2, 2}, 0.7)), labels, SmoothingOptions{eps, 255}).item(),
                std::log(5.0), 1e-12);
  }
}

TEST(LabelSmoothing, MatchesExplicitSumWithIgnoredPixels) {
  Rng rng(54);
  const auto logits = rng.normal_tensor<double>(Shape{2, 3, 2, 3}, 2.0);
  const std::vector<std::int64_t> labels{0, 2, 255, 1, 1, 0, 2, 255, 0, 1, 2, 2};
  double total = 0;
  int counted = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x) {
        const auto label = labels[(b * 2 + y) * 3 + x];
        if (label == 255) continue;
        double z = 0;
        for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits.at(b, k, y, x));
        for (std::size_t k = 0; k < 3; ++k) {
          const double target = (k == static_cast<std::size_t>(label) ? 0.9 : 0.0) + 0.1 / 3;
          total -= target * (logits.at(b, k, y, x) - std::log(z));
        }
        ++counted;
      }
  EXPECT_NEAR(ce_label_smoothing(cst(logits), labels).item(), total / counted, 1e-10);
}

TEST(LabelSmoothing, RejectsBadLabels) {
  const std::vector<std::int64_t> labels{0, 3};
  EXPECT_THROW(ce_label_smoothing(cst(Tensor<double>(Shape{1, 3, 1, 2})), labels), std::out_of_range);
  const std::vector<std::int64_t> short_labels{0};
  EXPECT_THROW(ce_label_smoothing(cst(Tensor<double>(Shape{1, 3, 1, 2})), short_labels), DimensionError);
}

TEST(TotalLoss, WeightedSums) {
  EXPECT_DOUBLE_EQ(total_loss(1, 1, 1), 1.25);
  EXPECT_DOUBLE_EQ(total_loss(2, 0.5, 1), 1.2);
  EXPECT_EQ(total_loss(3, 4, 5, LossWeights{0, 0, 0}), 0.0);
  EXPECT_THROW(total_loss(1, 1, 1, LossWeights{-1, 0, 0}), std::invalid_argument);
  const auto v = total_loss(cst(Tensor<double>(Shape{1}, 2.0)), cst(Tensor<double>(Shape{1}, 0.5)),
                            cst(Tensor<double>(Shape{1}, 1.0)));
  EXPECT_DOUBLE_EQ(v.item(), 1.2);
}

TEST(Losses, NonNegativeAndFinite) {
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = cst(rng.uniform_tensor<double>(Shape{3, 4}, 0.0, 1.0));
    const auto t = binary(rng, Shape{3, 4});
    for (double v : {focal_loss(p, t).item(), bce_loss(p, t).item(), dice_loss(p, t).item()}) {
      EXPECT_GE(v, 0.0);
      EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Losses, GradientChecks) {
  Rng rng(56);
  const auto t = binary(rng, Shape{4, 4});
  const auto p = rng.uniform_tensor<double>(Shape{4, 4}, 0.05, 0.95);
  for (const ScalarFn& f : std::vector<ScalarFn>{
           [&](const Var<double>& x) { return focal_loss(x, t); },
           [&](const Var<double>& x) { return bce_loss(x, t); },
           [&](const Var<double>& x) { return dice_loss(x, t); },
           [&](const Var<double>& x) { return bce_dice_loss(x, t); },
       }) {
    EXPECT_LE(grad_check(f, p).max_rel_error, 1e-4);
  }
  const std::vector<std::int64_t> labels{0, 2, 255, 1, 1, 0, 2, 1};
  const auto res = grad_check([&](const Var<double>& x) { return ce_label_smoothing(x, labels); },
                              rng.normal_tensor<double>(Shape{2, 3, 2, 2}));
  EXPECT_LE(res.max_rel_error, 1e-4);
}

}  // namespace
}  // namespace maskgen
