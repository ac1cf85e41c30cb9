#include <gtest/gtest.h>

#include <cmath>

#include "dplab/layers.hpp"
#include "testutil.hpp"

using namespace dplab;

TEST(Activation, BoundedReluPiecewise) {
  Tensor x = Tensor::vector1d({5.0, 1.0, -3.0});
  Tensor y = activation_forward(ActivationKind::BoundedReLU, 2.0, x);
  EXPECT_DOUBLE_EQ(y[0], 2.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[2], 0.0);
}

TEST(Activation, ReluBasics) {
  Tensor x = Tensor::vector1d({-3.0, 3.0});
  Tensor y = activation_forward(ActivationKind::ReLU, 0.0, x);
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 3.0);
}

TEST(Activation, HugeBoundMatchesRelu) {
  Rng rng(1);
  Tensor x = test::random_tensor(rng, {1000}, -10.0, 10.0);
  Tensor relu = activation_forward(ActivationKind::ReLU, 0.0, x);
  Tensor brelu = activation_forward(ActivationKind::BoundedReLU, 1e12, x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(relu[i], brelu[i]);
  Tensor up = test::random_tensor(rng, {1000});
  Tensor grelu = activation_backward(ActivationKind::ReLU, 0.0, x, up);
  Tensor gbrelu = activation_backward(ActivationKind::BoundedReLU, 1e12, x, up);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(grelu[i], gbrelu[i]);
}

TEST(Activation, BoundedReluDerivativeCases) {
  Tensor x = Tensor::vector1d({5.0, 1.0, -1.0});
  Tensor up = Tensor::vector1d({1.0, 1.0, 1.0});
  Tensor g = activation_backward(ActivationKind::BoundedReLU, 2.0, x, up);
  EXPECT_DOUBLE_EQ(g[0], 0.0);  // above the bound
  EXPECT_DOUBLE_EQ(g[1], 1.0);  // inside (0, a)
  EXPECT_DOUBLE_EQ(g[2], 0.0);  // negative
}

TEST(Activation, ReluPassesGradientAboveZero) {
  Tensor x = Tensor::vector1d({5.0});
  Tensor up = Tensor::vector1d({3.5});
  Tensor g = activation_backward(ActivationKind::ReLU, 0.0, x, up);
  EXPECT_DOUBLE_EQ(g[0], 3.5);
}

TEST(Activation, ZeroUpstreamZeroGradient) {
  Rng rng(2);
  Tensor x = test::random_tensor(rng, {64});
  Tensor up({64}, 0.0);
  for (auto kind : {ActivationKind::ReLU, ActivationKind::BoundedReLU,
                    ActivationKind::Tanh}) {
    Tensor g = activation_backward(kind, 2.0, x, up);
    for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_DOUBLE_EQ(g[i], 0.0);
  }
}

TEST(Activation, BoundedReluMonotoneAndBounded) {
  Rng rng(3);
  const double a = 1.7;
  double prev_x = -1e9, prev_y = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const double xv = rng.uniform(-5.0, 5.0);
    Tensor y = activation_forward(ActivationKind::BoundedReLU, a,
                                  Tensor::vector1d({xv}));
    EXPECT_GE(y[0], 0.0);
    EXPECT_LE(y[0], a);
    if (xv >= prev_x) {
      EXPECT_GE(y[0], prev_y);
    }
    // keep a sorted reference pair
    if (xv >= prev_x) {
      prev_x = xv;
      prev_y = y[0];
    }
  }
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(4);
  Tensor logits = test::random_tensor(rng, {8, 10}, -30.0, 30.0);
  Tensor p = softmax_rows(logits);
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 10; ++j) s += p(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Norm, ConstantInputZeroOutput) {
  Tensor x({4, 3}, 5.0);
  for (int axis : {0, 1}) {
    Tensor y = norm_forward(NormKind::BatchNorm, axis, x, Mode::Train);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 0.0, 1e-9);
  }
}

TEST(Norm, TwoSampleBatchAlreadyStandardized) {
  Tensor x = Tensor::matrix(2, 3, {-1, -1, -1, 1, 1, 1});
  Tensor y = norm_forward(NormKind::BatchNorm, 0, x, Mode::Train);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(y(0, j), -1.0, 1e-4);
    EXPECT_NEAR(y(1, j), 1.0, 1e-4);
  }
}

TEST(Norm, RandomBatchStandardizedMoments) {
  Rng rng(5);
  Tensor x = test::random_tensor(rng, {64, 16}, -3.0, 7.0);
  for (int axis : {0, 1}) {
    Tensor y = norm_forward(NormKind::LayerNorm, axis, x, Mode::Train);
    const std::size_t groups = axis == 0 ? 16 : 64;
    const std::size_t m = axis == 0 ? 64 : 16;
    for (std::size_t g = 0; g < groups; ++g) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double v = axis == 0 ? y(i, g) : y(g, i);
        mean += v;
      }
      mean /= m;
      for (std::size_t i = 0; i < m; ++i) {
        const double v = axis == 0 ? y(i, g) : y(g, i);
        var += (v - mean) * (v - mean);
      }
      var /= m;
      EXPECT_LT(std::abs(mean), 1e-10);
      EXPECT_NEAR(var, 1.0, 1e-3);  // eps-deflated
    }
  }
}

TEST(Norm, BatchSizeOneTrainThrows) {
  Tensor x({1, 4}, 2.0);
  EXPECT_THROW(norm_forward(NormKind::BatchNorm, 0, x, Mode::Train),
               StateError);
  // Sample-local statistics are fine with batch size 1.
  EXPECT_NO_THROW(norm_forward(NormKind::BatchNorm, 1, x, Mode::Train));
}

TEST(Norm, BatchNormEvalUsesRunningStats) {
  const std::size_t features = 3;
  Tensor gamma({features}, 1.0);
  Tensor beta({features}, 0.0);
  Tensor running_mean({features}, 0.0);
  Tensor running_var({features}, 1.0);
  Rng rng(6);
  Tensor x = test::random_tensor(rng, {32, features}, 2.0, 4.0);
  // Repeated train passes move the running stats toward the batch stats.
  for (int i = 0; i < 200; ++i) {
    norm_forward(NormKind::BatchNorm, 0, x, gamma, beta, Mode::Train,
                 &running_mean, &running_var);
  }
  NormResult eval = norm_forward(NormKind::BatchNorm, 0, x, gamma, beta,
                                 Mode::Eval, &running_mean, &running_var);
  NormResult train = norm_forward(NormKind::BatchNorm, 0, x, gamma, beta,
                                  Mode::Train, &running_mean, &running_var);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_NEAR(eval.y[i], train.y[i], 1e-6);
  }
}

TEST(Dropout, EvalIsIdentityViaZeroMask) {
  // Eval-mode dropout is handled in the model forward; the mask utility
  // itself must keep expectation: mean over many masks near 1.
  Rng rng(7);
  const double p = 0.5;
  double total = 0.0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    Tensor m = dropout_mask(rng, {1}, p);
    total += m[0];
  }
  EXPECT_NEAR(total / trials, 1.0, 0.01);
}

TEST(Dropout, InvalidRateThrows) {
  Rng rng(8);
  EXPECT_THROW(dropout_mask(rng, {4}, 1.0), ValueError);
  EXPECT_THROW(dropout_mask(rng, {4}, -0.1), ValueError);
}
