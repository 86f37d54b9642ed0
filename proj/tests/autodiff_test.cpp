// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <functional>
#include <memory>

#include "maskgen/numerics.hpp"

namespace maskgen {
namespace {

constexpr double kTol = 1e-4;

// Each composite closes over constant operands and exposes one input.
void expect_grad_ok(const ScalarFn& f, const Tensor<double>& x, double tol = kTol) {
  const auto res = grad_check(f, x);
  EXPECT_LE(res.max_rel_error, tol) << "worst coordinate " << res.worst_coordinate << " analytic "
                                    << res.analytic_at_worst << " numeric " << res.numeric_at_worst;
}

TEST(Tape, BackwardVisitsEachRecordedOpOnce) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  const auto y = sigmoid(x);
  const auto z = mul(y, x);
  const auto s = sum_all(z);  // reshape + sum
  EXPECT_EQ(tape.size(), 5u);  // leaf, sigmoid, mul, reshape, sum
  EXPECT_EQ(tape.backward(s), 4u);
  // A second replay recomputes from scratch rather than accumulating.
  const auto g1 = tape.grad(x);
  tape.backward(s);
  EXPECT_EQ(tape.grad(x), g1);
}

TEST(Tape, UnusedInputsGetExactZeros) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>(Shape{3}, {1, 2, 3}));
  const auto unused = tape.leaf(Tensor<double>(Shape{3}, {4, 5, 6}));
  tape.backward(sum_all(mul(x, x)));
  const auto g_unused = tape.grad(unused);
  for (double g : g_unused.data()) EXPECT_EQ(g, 0.0);
  EXPECT_DOUBLE_EQ(tape.grad(x)[2], 6.0);
}

TEST(Tape, ConstantsRecordNothing) {
  const auto x = Var<double>::constant(Tensor<double>(Shape{2}, {1, 2}));
  const auto y = sigmoid(x);
  EXPECT_FALSE(y.tracked());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Tape, NonFiniteResultIsAnError) {
  const auto x = Var<double>::constant(Tensor<double>(Shape{2}, {0.0, 1.0}));
  EXPECT_THROW(log(x), NumericError);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}));
  EXPECT_THROW(tape.backward(sigmoid(x)), DimensionError);
}

class OpGradients : public ::testing::Test {
 protected:
  Rng rng{2024};
  Tensor<double> normal(Shape s) { return rng.normal_tensor<double>(s); }
  Var<double> cst(Shape s) { return Var<double>::constant(normal(s)); }
};

TEST_F(OpGradients, MatmulBothSides) {
  const auto b = cst(Shape{4, 3});
  expect_grad_ok([&](const Var<double>& a) { return sum_all(mul(matmul(a, b), matmul(a, b))); }, normal(Shape{2, 4}));
  const auto a = cst(Shape{2, 5, 4});
  expect_grad_ok([&](const Var<double>& w) { return sum_all(sigmoid(matmul(a, w))); }, normal(Shape{4, 3}));
}

TEST_F(OpGradients, BatchedTransposedMatmul) {
  const auto a = cst(Shape{2, 3, 4});
  const auto w = cst(Shape{2, 3, 5});
  expect_grad_ok([&](const Var<double>& b) { return sum_all(mul(matmul(a, b, true), w)); }, normal(Shape{2, 5, 4}));
  const auto b = cst(Shape{2, 5, 4});
  expect_grad_ok([&](const Var<double>& x) { return sum_all(mul(matmul(x, b, true), w)); }, normal(Shape{2, 3, 4}));
}

TEST_F(OpGradients, BroadcastAddAndMul) {
  const auto big = cst(Shape{2, 3, 4});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(sigmoid(mul(add(big, v), v))); }, normal(Shape{3, 1}));
  expect_grad_ok([&](const Var<double>& v) { return sum_all(sigmoid(mul(big, v))); }, normal(Shape{1}));
}

TEST_F(OpGradients, SoftmaxWithKeyMask) {
  const auto w = cst(Shape{2, 3, 4});
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 1, 1, 1};
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(softmax_lastdim(v, mask), w)); }, normal(Shape{2, 3, 4}));
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(log_softmax_lastdim(v), w)); }, normal(Shape{2, 3, 4}));
}

TEST_F(OpGradients, LayerNormAndL2Norm) {
  const auto w = cst(Shape{3, 6});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(layer_norm_lastdim(v), w)); }, normal(Shape{3, 6}));
  expect_grad_ok([&](const Var<double>& v) { return sum_all(l2norm_lastdim(v)); }, normal(Shape{3, 6}));
}

TEST_F(OpGradients, PointwiseMaps) {
  auto pos = rng.uniform_tensor<double>(Shape{7}, 0.2, 2.0);
  expect_grad_ok([](const Var<double>& v) { return sum_all(log(v)); }, pos);
  expect_grad_ok([](const Var<double>& v) { return sum_all(reciprocal(v)); }, pos);
  expect_grad_ok([](const Var<double>& v) { return sum_all(pow_scalar(v, 2.5)); }, pos);
  expect_grad_ok([](const Var<double>& v) { return sum_all(exp(v)); }, pos);
  expect_grad_ok([](const Var<double>& v) { return sum_all(gelu(v)); }, normal(Shape{7}));
  expect_grad_ok([](const Var<double>& v) { return sum_all(mul(clamp(v, -0.5, 0.5), v)); }, normal(Shape{7}));
}

TEST_F(OpGradients, BilinearGatherScatter) {
  const auto w = cst(Shape{1, 2, 6, 9});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(bilinear_upsample(v, 3), w)); }, normal(Shape{1, 2, 2, 3}));
  auto index = std::make_shared<Index>(Index{3, -1, 0, 3, 1});
  const auto w2 = cst(Shape{5, 2});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(gather_rows(v, 2, index, Shape{5, 2}), w2)); },
                 normal(Shape{4, 2}));
  const auto w3 = cst(Shape{4, 2});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(scatter_rows(v, 2, index, Shape{4, 2}), w3)); },
                 normal(Shape{5, 2}));
}

TEST_F(OpGradients, PermuteAndMinMax) {
  const auto w = cst(Shape{4, 2, 3});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(permute(v, {2, 0, 1}), w)); }, normal(Shape{2, 3, 4}));
  const auto w2 = cst(Shape{2, 5});
  expect_grad_ok([&](const Var<double>& v) { return sum_all(mul(minmax_normalize(v, true), w2)); }, normal(Shape{2, 5}));
}

TEST(Permute, MatchesIndexArithmetic) {
  Rng rng(5);
  const auto x = rng.normal_tensor<double>(Shape{2, 3, 4});
  const auto y = permute(Var<double>::constant(x), {1, 2, 0}).value();
  ASSERT_EQ(y.shape(), Shape({3, 4, 2}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(b, c, a), x.at(a, b, c));
}

TEST(Scatter, IsAdjointOfGather) {
  Rng rng(6);
  auto index = std::make_shared<Index>(Index{2, 0, -1, 2});
  const auto x = rng.normal_tensor<double>(Shape{3, 2});
  const auto y = rng.normal_tensor<double>(Shape{4, 2});
  const auto gx = gather_rows(Var<double>::constant(x), 2, index, Shape{4, 2}).value();
  const auto sy = scatter_rows(Var<double>::constant(y), 2, index, Shape{3, 2}).value();
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < gx.size(); ++i) lhs += gx[i] * y[i];
  for (std::size_t i = 0; i < sy.size(); ++i) rhs += sy[i] * x[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

}  // namespace
}  // namespace maskgen
