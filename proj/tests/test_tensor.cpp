#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mammo/tensor.hpp"

using namespace mammo;

TEST(Primitives, GradientsMatchFiniteDifferences) {
  for (OpKind k : gradcheck::all_primitives()) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const double e = gradcheck::check_case(gradcheck::make_case(k, s), s);
      EXPECT_LT(e, 1e-3) << op_name(k) << " seed " << s;
    }
  }
}

TEST(Primitives, EveryKindHasAGenerator) { EXPECT_GE(gradcheck::all_primitives().size(), 20u); }

TEST(Tensor, FromRejectsWrongCount) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
}

TEST(Tensor, MatmulHandValues) {
  auto a = TensorD::from({2, 2}, {1, 2, 3, 4});
  auto b = TensorD::from({2, 2}, {5, 6, 7, 8});
  auto c = ops::matmul(a, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Rng rng(3);
  auto x = gradcheck::rand_tensor(rng, {4, 7}, -20, 20);
  auto y = ops::softmax(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += y.at(r * 7 + j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, DepthwiseDoesNotMixChannels) {
  Rng rng(5);
  auto x = gradcheck::rand_tensor(rng, {1, 3, 6, 6});
  auto w = gradcheck::rand_tensor(rng, {3, 1, 3, 3});
  auto base = ops::depthwise_conv2d(x, w, static_cast<const TensorD*>(nullptr), 1, 1);
  auto x2 = x.detach();
  for (std::size_t i = 36; i < 72; ++i) x2.mutable_data()[i] += 5.0;  // channel 1 only
  auto out = ops::depthwise_conv2d(x2, w, static_cast<const TensorD*>(nullptr), 1, 1);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(out.at(i), base.at(i));
  for (std::size_t i = 72; i < 108; ++i) EXPECT_EQ(out.at(i), base.at(i));
}

TEST(Tensor, LeafGradientsAccumulate) {
  auto x = TensorD::from({2}, {1.0, 2.0}, true);
  backward(ops::sum(ops::mul(x, x)));
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto x = TensorD::from({2}, {1.0, 2.0}, true);
  NoGradGuard g;
  auto y = ops::sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, BackwardNeedsScalar) {
  auto x = TensorD::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), GraphError);
}

TEST(Tensor, MaxPoolPicksMaximum) {
  auto x = TensorD::from({1, 1, 2, 2}, {1, 4, 3, 2});
  EXPECT_EQ(ops::max_pool2d(x, 2, 2).item(), 4.0);
}

TEST(Tensor, LayerNormZeroMeanUnitVariance) {
  Rng rng(9);
  auto x = gradcheck::rand_tensor(rng, {3, 16}, -4, 9);
  auto y = ops::layer_norm(x, TensorD::full({16}, 1.0), TensorD::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(r * 16 + j) / 16;
    for (std::size_t j = 0; j < 16; ++j) v += std::pow(y.at(r * 16 + j) - m, 2) / 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Tensor, ConvShapeErrors) {
  auto x = TensorD::zeros({1, 2, 4, 4});
  auto w = TensorD::zeros({3, 1, 3, 3});
  EXPECT_THROW(ops::conv2d(x, w, static_cast<const TensorD*>(nullptr), 1, 1), ShapeError);
}

TEST(Tensor, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  auto z = TensorD::from({1, 2}, {0.0, 0.0}, true);
  const int y[1] = {1};
  backward(ops::softmax_cross_entropy(z, std::span<const int>(y)));
  EXPECT_NEAR(z.grad()[0], 0.5, 1e-12);
  EXPECT_NEAR(z.grad()[1], -0.5, 1e-12);
}
