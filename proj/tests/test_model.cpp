#include <gtest/gtest.h>

#include <cmath>

#include "dplab/model.hpp"
#include "testutil.hpp"

using namespace dplab;

namespace {

// Small dense-only chain for cheap exact checks.
Model tiny_dense_model(ActivationKind act = ActivationKind::Tanh,
                       double a = 2.0) {
  std::vector<LayerSpec> layers{
      LayerSpec::dense(6), LayerSpec::activation(act, a), LayerSpec::dense(3),
      LayerSpec::softmax()};
  Model m = make_model(std::move(layers), {4});
  Rng rng(100);
  init_params(m, rng);
  return m;
}

std::vector<double> per_sample_mean(const PerSampleGradients& psg) {
  std::vector<double> mean(psg.param_len, 0.0);
  for (std::size_t i = 0; i < psg.batch_size; ++i) {
    axpy(1.0 / psg.batch_size, psg.sample(i), mean);
  }
  return mean;
}

}  // namespace

TEST(BuildModel, MnistChainMatchesTable) {
  Model m = build_model(Arch::MnistCnn, ActivationKind::ReLU);
  std::vector<LayerKind> kinds;
  for (const auto& l : m.layers) kinds.push_back(l.kind);
  const std::vector<LayerKind> expect{
      LayerKind::Conv,      LayerKind::Activation, LayerKind::MaxPool,
      LayerKind::Conv,      LayerKind::Activation, LayerKind::MaxPool,
      LayerKind::Dense,     LayerKind::Activation, LayerKind::Dense,
      LayerKind::Softmax};
  EXPECT_EQ(kinds, expect);
  EXPECT_EQ(m.layers[0].filters, 16);
  EXPECT_EQ(m.layers[0].kernel, 8);
  EXPECT_EQ(m.layers[0].stride, 2);
  EXPECT_EQ(m.layers[3].filters, 32);
  EXPECT_EQ(m.layers[3].kernel, 4);
  EXPECT_EQ(m.layers[6].units, 32);
  EXPECT_EQ(m.layers[8].units, 10);
  // Geometry: 28 -> 14 -> 13 -> 5 -> 4, dense input 32*4*4.
  EXPECT_EQ(m.weights[6].dim(0), 512u);
}

TEST(BuildModel, CifarChainMatchesTable) {
  Model m = build_model(Arch::Cifar10Cnn, ActivationKind::BoundedReLU, 4.0);
  int conv_count = 0;
  std::vector<int> filters;
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::Conv) {
      ++conv_count;
      filters.push_back(l.filters);
    }
  }
  EXPECT_EQ(conv_count, 4);
  EXPECT_EQ(filters, (std::vector<int>{32, 64, 128, 256}));
  // 32 -> 16 -> 8 -> 4 -> 2 through the pool chain; dense sees 256*2*2.
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].kind == LayerKind::Dense) {
      EXPECT_EQ(m.weights[i].dim(0), 1024u);
      break;
    }
  }
}

TEST(BuildModel, MissingBoundThrows) {
  EXPECT_THROW(build_model(Arch::MnistCnn, ActivationKind::BoundedReLU),
               ConfigError);
}

TEST(BuildModel, NormAndDropoutInsertion) {
  Model m = build_model(Arch::MnistCnn, ActivationKind::ReLU, std::nullopt,
                        std::make_pair(NormKind::BatchNorm, 0), 0.5);
  // conv -> act -> norm -> dropout -> pool twice, then dense/act/dropout.
  EXPECT_EQ(m.layers[2].kind, LayerKind::BatchNorm);
  EXPECT_EQ(m.layers[3].kind, LayerKind::Dropout);
  EXPECT_EQ(m.layers[4].kind, LayerKind::MaxPool);
  int dropout_count = 0;
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::Dropout) ++dropout_count;
  }
  EXPECT_EQ(dropout_count, 3);
  EXPECT_TRUE(m.has_batch_stat_norm());
}

TEST(Forward, ProbabilityRowsSumToOne) {
  Model m = build_model(Arch::MnistCnn, ActivationKind::ReLU);
  Rng rng(1);
  init_params(m, rng);
  Tensor batch = test::random_tensor(rng, {3, 1, 28, 28}, 0.0, 1.0);
  ForwardResult fwd = forward(m, batch);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 10; ++j) s += fwd.probs(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, ZeroModelGivesUniformProbabilities) {
  Model m = build_model(Arch::MnistCnn, ActivationKind::ReLU);
  Rng rng(2);
  Tensor batch = test::random_tensor(rng, {2, 1, 28, 28}, 0.0, 1.0);
  ForwardResult fwd = forward(m, batch);  // params still zero
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      EXPECT_NEAR(fwd.probs(i, j), 0.1, 1e-12);
}

TEST(Forward, DeterministicAcrossRuns) {
  Rng data_rng(3);
  Tensor batch = test::random_tensor(data_rng, {2, 1, 28, 28}, 0.0, 1.0);
  auto run = [&]() {
    Model m = build_model(Arch::MnistCnn, ActivationKind::BoundedReLU, 2.0);
    Rng rng(77);
    init_params(m, rng);
    return forward(m, batch).logits;
  };
  Tensor a = run();
  Tensor b = run();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Forward, ShapeMismatchThrows) {
  Model m = build_model(Arch::MnistCnn, ActivationKind::ReLU);
  Tensor batch({2, 1, 27, 27}, 0.0);
  EXPECT_THROW(forward(m, batch), ShapeError);
}

TEST(BackwardPerSample, SingleSampleEqualsBatchGradient) {
  Model m = tiny_dense_model();
  Rng rng(4);
  Tensor batch = test::random_tensor(rng, {1, 4});
  std::vector<int> labels{2};
  ForwardResult fwd = forward(m, batch);
  auto [psg, loss] = backward_per_sample(m, fwd, labels);
  auto [batch_grad, loss2] = backward_batch(m, fwd, labels);
  ASSERT_EQ(psg.batch_size, 1u);
  EXPECT_DOUBLE_EQ(loss, loss2);
  for (std::size_t j = 0; j < psg.param_len; ++j) {
    EXPECT_NEAR(psg.sample(0)[j], batch_grad[j], 1e-15);
  }
}

TEST(BackwardPerSample, DuplicatedSampleIdenticalGradients) {
  Model m = tiny_dense_model();
  Rng rng(5);
  Tensor one = test::random_tensor(rng, {1, 4});
  Tensor batch({2, 4});
  for (int i = 0; i < 4; ++i) {
    batch(0, i) = one[i];
    batch(1, i) = one[i];
  }
  ForwardResult fwd = forward(m, batch);
  auto [psg, loss] = backward_per_sample(m, fwd, {1, 1});
  for (std::size_t j = 0; j < psg.param_len; ++j) {
    EXPECT_EQ(psg.sample(0)[j], psg.sample(1)[j]);
  }
}

TEST(BackwardPerSample, EvalModeThrows) {
  Model m = tiny_dense_model();
  Rng rng(6);
  Tensor batch = test::random_tensor(rng, {2, 4});
  ForwardResult fwd = forward(m, batch);
  m.mode = Mode::Eval;
  EXPECT_THROW(backward_per_sample(m, fwd, std::vector<int>{0, 1}), StateError);
}

TEST(BackwardPerSample, MeanEqualsBatchGradientWithoutBatchNorm) {
  // Holds for conv/pool/dense/activation/layer-norm chains.
  std::vector<LayerSpec> layers{
      LayerSpec::conv(2, 3, 1, 1),
      LayerSpec::activation(ActivationKind::BoundedReLU, 1.5),
      LayerSpec::norm(NormKind::LayerNorm, 1),
      LayerSpec::maxpool(2, 2),
      LayerSpec::dense(5),
      LayerSpec::activation(ActivationKind::Tanh, 0.0),
      LayerSpec::dense(3),
      LayerSpec::softmax()};
  Model m = make_model(std::move(layers), {1, 6, 6});
  Rng rng(7);
  init_params(m, rng);
  Tensor batch = test::random_tensor(rng, {5, 1, 6, 6});
  std::vector<int> labels{0, 1, 2, 1, 0};
  ForwardResult fwd = forward(m, batch);
  auto [psg, l1] = backward_per_sample(m, fwd, labels);
  auto [batch_grad, l2] = backward_batch(m, fwd, labels);
  auto mean = per_sample_mean(psg);
  for (std::size_t j = 0; j < mean.size(); ++j) {
    EXPECT_NEAR(mean[j], batch_grad[j], 1e-10);
  }
}

TEST(GradCheck, TinyDenseModelFiniteDifferences) {
  Model m = tiny_dense_model();
  Rng rng(8);
  Tensor batch = test::random_tensor(rng, {3, 4});
  std::vector<int> labels{0, 1, 2};
  ForwardResult fwd = forward(m, batch);
  auto [batch_grad, loss] = backward_batch(m, fwd, labels);
  auto loss_fn = [&](const std::vector<double>& p) {
    return test::model_loss_at(m, p, batch, labels);
  };
  auto report = test::finite_difference_check(loss_fn, m.flat_params(),
                                              batch_grad);
  EXPECT_LT(report.max_rel_err, 1e-4)
      << "worst coord " << report.worst_coord << ": analytic "
      << report.analytic_at_worst << " numeric " << report.numeric_at_worst;
}

TEST(GradCheck, EveryLayerKindInIsolation) {
  struct Case {
    const char* name;
    std::vector<LayerSpec> layers;
    std::vector<std::size_t> input_shape;
  };
  std::vector<Case> cases;
  cases.push_back({"conv",
                   {LayerSpec::conv(2, 3, 2, 1), LayerSpec::dense(3),
                    LayerSpec::softmax()},
                   {2, 5, 5}});
  cases.push_back({"maxpool",
                   {LayerSpec::maxpool(2, 2), LayerSpec::dense(3),
                    LayerSpec::softmax()},
                   {1, 6, 6}});
  cases.push_back({"relu",
                   {LayerSpec::dense(6),
                    LayerSpec::activation(ActivationKind::ReLU, 0.0),
                    LayerSpec::dense(3), LayerSpec::softmax()},
                   {4}});
  cases.push_back({"bounded_relu",
                   {LayerSpec::dense(6),
                    LayerSpec::activation(ActivationKind::BoundedReLU, 0.7),
                    LayerSpec::dense(3), LayerSpec::softmax()},
                   {4}});
  cases.push_back({"tanh",
                   {LayerSpec::dense(6),
                    LayerSpec::activation(ActivationKind::Tanh, 0.0),
                    LayerSpec::dense(3), LayerSpec::softmax()},
                   {4}});
  cases.push_back({"layer_norm_axis1",
                   {LayerSpec::dense(6), LayerSpec::norm(NormKind::LayerNorm, 1),
                    LayerSpec::dense(3), LayerSpec::softmax()},
                   {4}});
  cases.push_back({"dropout",
                   {LayerSpec::dense(6), LayerSpec::dropout(0.4),
                    LayerSpec::dense(3), LayerSpec::softmax()},
                   {4}});

  Rng rng(9);
  for (auto& c : cases) {
    Model m = make_model(c.layers, c.input_shape);
    Rng init_rng(10);
    init_params(m, init_rng);
    std::vector<std::size_t> batch_shape = c.input_shape;
    batch_shape.insert(batch_shape.begin(), 4);
    Tensor batch = test::random_tensor(rng, batch_shape);
    std::vector<int> labels{0, 1, 2, 1};

    // Fixed masks/stats for both the analytic pass and the perturbed losses.
    Rng mask_rng(7);
    BatchContext ctx = make_batch_context(m, batch, &mask_rng);
    ForwardResult fwd = forward(m, batch, nullptr, &ctx, 0, false);
    auto [batch_grad, loss] = backward_batch(m, fwd, labels);
    auto loss_fn = [&](const std::vector<double>& p) {
      return test::model_loss_frozen_ctx(m, p, batch, labels, ctx);
    };
    auto report = test::finite_difference_check(loss_fn, m.flat_params(),
                                                batch_grad);
    EXPECT_LT(report.max_rel_err, 1e-4)
        << c.name << ": worst coord " << report.worst_coord << " analytic "
        << report.analytic_at_worst << " numeric " << report.numeric_at_worst;
  }
}

TEST(GradCheck, BatchStatNormsWithFrozenStatistics) {
  // Batch-statistic norms treat (mean, var) as constants in backward; the
  // finite-difference oracle freezes the same statistics.
  for (auto kind : {NormKind::BatchNorm, NormKind::LayerNorm}) {
    std::vector<LayerSpec> layers{
        LayerSpec::conv(2, 3, 1, 0), LayerSpec::norm(kind, 0),
        LayerSpec::activation(ActivationKind::ReLU, 0.0), LayerSpec::dense(3),
        LayerSpec::softmax()};
    Model m = make_model(std::move(layers), {1, 5, 5});
    Rng init_rng(11);
    init_params(m, init_rng);
    Rng rng(12);
    Tensor batch = test::random_tensor(rng, {4, 1, 5, 5});
    std::vector<int> labels{0, 1, 2, 0};
    BatchContext ctx = make_batch_context(m, batch, nullptr);
    ForwardResult fwd = forward(m, batch, nullptr, &ctx, 0, false);
    auto [batch_grad, loss] = backward_batch(m, fwd, labels);
    auto loss_fn = [&](const std::vector<double>& p) {
      return test::model_loss_frozen_ctx(m, p, batch, labels, ctx);
    };
    auto report = test::finite_difference_check(loss_fn, m.flat_params(),
                                                batch_grad);
    EXPECT_LT(report.max_rel_err, 1e-4)
        << "worst coord " << report.worst_coord;
  }
}

TEST(GradCheck, ShrunkEndToEndConvModel) {
  // Table-style conv/pool/dense chain shrunk to ~200 parameters.
  std::vector<LayerSpec> layers{
      LayerSpec::conv(2, 3, 2, 1),
      LayerSpec::activation(ActivationKind::BoundedReLU, 0.8),
      LayerSpec::maxpool(2, 1),
      LayerSpec::conv(3, 2, 2, 0),
      LayerSpec::activation(ActivationKind::BoundedReLU, 0.8),
      LayerSpec::maxpool(2, 1),
      LayerSpec::dense(4),
      LayerSpec::activation(ActivationKind::BoundedReLU, 0.8),
      LayerSpec::dense(3),
      LayerSpec::softmax()};
  Model m = make_model(std::move(layers), {1, 12, 12});
  Rng init_rng(13);
  init_params(m, init_rng);
  ASSERT_LE(m.param_count(), 200u);
  Rng rng(14);
  Tensor batch = test::random_tensor(rng, {3, 1, 12, 12});
  std::vector<int> labels{0, 2, 1};
  ForwardResult fwd = forward(m, batch);
  auto [batch_grad, loss] = backward_batch(m, fwd, labels);
  auto loss_fn = [&](const std::vector<double>& p) {
    return test::model_loss_at(m, p, batch, labels);
  };
  auto report = test::finite_difference_check(loss_fn, m.flat_params(),
                                              batch_grad);
  EXPECT_LT(report.max_rel_err, 1e-4)
      << "worst coord " << report.worst_coord << " analytic "
      << report.analytic_at_worst << " numeric " << report.numeric_at_worst;
}

TEST(Dropout, EvalModeIsIdentity) {
  std::vector<LayerSpec> layers{LayerSpec::dense(5), LayerSpec::dropout(0.5),
                                LayerSpec::dense(3), LayerSpec::softmax()};
  Model m = make_model(std::move(layers), {4});
  Rng init_rng(15);
  init_params(m, init_rng);
  Rng rng(16);
  Tensor batch = test::random_tensor(rng, {2, 4});
  m.mode = Mode::Eval;
  ForwardResult a = forward(m, batch);
  ForwardResult b = forward(m, batch);
  for (std::size_t i = 0; i < a.logits.numel(); ++i) {
    EXPECT_EQ(a.logits[i], b.logits[i]);
  }
}

TEST(Dropout, TrainModePreservesExpectedActivation) {
  // Inverted scaling: E[mask * x] = x. Mean over many masks within 1%.
  Rng rng(17);
  Tensor x = test::random_tensor(rng, {50}, 0.5, 1.5);
  Tensor acc({50}, 0.0);
  const int trials = 100000;
  Rng mask_rng(18);
  for (int t = 0; t < trials; ++t) {
    Tensor mask = dropout_mask(mask_rng, {50}, 0.5);
    for (std::size_t i = 0; i < 50; ++i) acc[i] += mask[i] * x[i];
  }
  double mean_ratio = 0.0;
  for (std::size_t i = 0; i < 50; ++i) mean_ratio += (acc[i] / trials) / x[i];
  mean_ratio /= 50;
  EXPECT_NEAR(mean_ratio, 1.0, 0.01);
}

TEST(Model, ParamRoundTrip) {
  Model m = build_model(Arch::MnistCnn, ActivationKind::ReLU);
  Rng rng(19);
  init_params(m, rng);
  auto p = m.flat_params();
  Model m2 = build_model(Arch::MnistCnn, ActivationKind::ReLU);
  m2.set_flat_params(p);
  auto p2 = m2.flat_params();
  ASSERT_EQ(p.size(), p2.size());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], p2[i]);
}
