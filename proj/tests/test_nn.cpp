#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "debnn/data.hpp"
#include "debnn/nn.hpp"
#include "support.hpp"

namespace debnn {
namespace {

using testing::random_batch;
using testing::random_params;

// Unpacks the flat layout by hand: W (out x in, row-major), then b.
Eigen::MatrixXd reference_forward(const NetworkSpec& spec, const Eigen::VectorXd& theta,
                                  const Eigen::MatrixXd& x) {
  Eigen::MatrixXd h = x;
  Eigen::Index offset = 0;
  for (int l = 0; l < spec.num_affine(); ++l) {
    const int in = spec.layer_widths[static_cast<std::size_t>(l)];
    const int out = spec.layer_widths[static_cast<std::size_t>(l) + 1];
    Eigen::MatrixXd next(h.rows(), out);
    for (Eigen::Index n = 0; n < h.rows(); ++n) {
      for (int o = 0; o < out; ++o) {
        double acc = theta[offset + out * in + o];
        for (int i = 0; i < in; ++i) acc += theta[offset + o * in + i] * h(n, i);
        next(n, o) = l + 1 < spec.num_affine() ? std::tanh(acc) : acc;
      }
    }
    offset += out * in + out;
    h = next;
  }
  return h;
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  const auto spec = NetworkSpec::classifier({8}, 3, 4);
  ParamVector theta = init_params(spec, 1);
  theta.values.setZero();
  Rng rng(2);
  const Eigen::MatrixXd out = forward(spec, theta, testing::random_matrix(5, 3, rng));
  EXPECT_EQ(out.rows(), 5);
  EXPECT_EQ(out.cols(), 4);
  EXPECT_TRUE(out.isZero(0.0));
}

TEST(Forward, IdentityLinearMap) {
  const NetworkSpec spec{{2, 2}, Activation::tanh, HeadKind::classifier, 2};
  ParamVector theta = init_params(spec, 0);
  theta.values << 1, 0, 0, 1, 0, 0;
  Eigen::MatrixXd x(1, 2);
  x << 1, 2;
  const Eigen::MatrixXd out = forward(spec, theta, x);
  EXPECT_EQ(out(0, 0), 1.0);
  EXPECT_EQ(out(0, 1), 2.0);
}

TEST(Forward, MatchesHandRolledMatmul) {
  const auto spec = NetworkSpec::classifier({16}, 2, 3);
  Rng rng(7);
  const ParamVector theta = random_params(spec, rng);
  const Eigen::MatrixXd x = testing::random_matrix(11, 2, rng);
  const Eigen::MatrixXd got = forward(spec, theta, x);
  const Eigen::MatrixXd want = reference_forward(spec, theta.values, x);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, FeaturesThenHeadEqualsForward) {
  const auto spec = NetworkSpec::regressor({5, 4}, 1);
  Rng rng(3);
  const ParamVector theta = random_params(spec, rng);
  const Eigen::MatrixXd x = testing::random_matrix(6, 1, rng);
  const Eigen::MatrixXd split = head_outputs(spec, theta.head(), features(spec, theta, x));
  EXPECT_LT((split - forward(spec, theta, x)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Spec, RejectsBadLayouts) {
  EXPECT_THROW((NetworkSpec{{3}, Activation::tanh, HeadKind::classifier, 3}.validate()), std::exception);
  EXPECT_THROW((NetworkSpec{{3, 4, 3}, Activation::tanh, HeadKind::classifier, 2}.validate()),
               std::exception);
  EXPECT_THROW((NetworkSpec{{1, 4, 3}, Activation::tanh, HeadKind::heteroscedastic_regressor, 0}
                    .validate()),
               std::exception);
  EXPECT_NO_THROW(NetworkSpec::classifier({64, 64}, 2, 2).validate());
}

TEST(Params, PartitionCoversLastLayer) {
  const auto spec = NetworkSpec::classifier({64, 64}, 2, 3);
  const ParamVector theta = init_params(spec, 5);
  EXPECT_EQ(theta.size(), param_count(spec));
  EXPECT_EQ(param_count(spec), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
  EXPECT_EQ(theta.last_layer.size(), 64 * 3 + 3);
  EXPECT_EQ(theta.last_layer.end, theta.size());
  EXPECT_LE(theta.values.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(2.0));
}

TEST(Loss, UniformSoftmaxNll) {
  const auto spec = NetworkSpec::classifier({4}, 2, 4);
  ParamVector theta = init_params(spec, 0);
  theta.values.setZero();
  Rng rng(1);
  const Batch b = random_batch(spec, 9, rng);
  EXPECT_NEAR(nll_and_grad(spec, theta, b, 0.0).nll, std::log(4.0), 1e-15);
}

TEST(Loss, GaussianAtModeNll) {
  const NetworkSpec spec{{1, 2}, Activation::tanh, HeadKind::heteroscedastic_regressor, 0};
  ParamVector theta = init_params(spec, 0);
  const double y = 0.3;
  // softplus(raw) + floor = 1
  const double raw = std::log(std::expm1(1.0 - kVarianceFloor));
  theta.values << 0, 0, y, raw;
  Batch b{Eigen::MatrixXd::Constant(3, 1, 2.5), Eigen::VectorXd::Constant(3, y)};
  EXPECT_NEAR(nll_and_grad(spec, theta, b, 0.0).nll, 0.5 * std::log(2 * std::numbers::pi), 1e-12);
}

class GradientCheck : public ::testing::TestWithParam<NetworkSpec> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const NetworkSpec spec = GetParam();
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    const ParamVector theta = random_params(spec, rng);
    const Batch batch = random_batch(spec, 7, rng);
    const auto value = [&](const Eigen::VectorXd& v) {
      ParamVector p = theta;
      p.values = v;
      return nll_and_grad(spec, p, batch, 0.3, 50).objective();
    };
    const Eigen::VectorXd analytic = nll_and_grad(spec, theta, batch, 0.3, 50).grad;
    const Eigen::VectorXd numeric = testing::numeric_gradient(value, theta.values, 1e-6);
    EXPECT_LT(testing::relative_error(analytic, numeric), 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(
    Heads, GradientCheck,
    ::testing::Values(NetworkSpec::classifier({5, 4}, 3, 3),
                      NetworkSpec::classifier({6}, 2, 2, Activation::relu),
                      NetworkSpec::regressor({6, 5}, 1), NetworkSpec::regressor({3}, 2)));

TEST(Loss, VarianceFloorIsBounded) {
  for (double raw : {-5.0, -1.0, 0.0, 0.7, 4.0, 30.0}) {
    const double v = variance_from_raw(raw);
    EXPECT_GT(v, 0.0);
    if (softplus(raw) > 1e-3) {
      // One rounding of the sum on top of the floor itself.
      EXPECT_LE(std::abs(v - softplus(raw)), kVarianceFloor + 4e-16 * v);
    }
  }
}

Dataset separable_blobs() {
  Dataset d = make_classification(ClassificationKind::two_moons, 200, 0.0, 4);
  for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) {
    d.inputs(i, 0) = d.targets[i] == 0 ? -2.0 : 2.0;
    d.inputs(i, 1) = 0.3 * std::sin(static_cast<double>(i));
  }
  return d;
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const auto spec = NetworkSpec::classifier({8}, 2, 2);
  TrainConfig c;
  c.epochs = 0;
  c.seed = 42;
  const TrainResult r = train_map(spec, separable_blobs(), c);
  EXPECT_EQ(r.theta.values, init_params(spec, 42).values);
  EXPECT_EQ(r.best_epoch, 0);
}

TEST(Train, SeparableBlobsReachFullTrainingAccuracy) {
  const auto spec = NetworkSpec::classifier({16}, 2, 2);
  const Dataset d = separable_blobs();
  TrainConfig c;
  c.epochs = 200;
  c.weight_decay = 1e-2;
  c.early_stop_patience = std::nullopt;
  const TrainResult r = train_map(spec, d, c);
  const Batch train = d.train();
  const Eigen::MatrixXd logits = forward(spec, r.theta, train.x);
  int correct = 0;
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    correct += static_cast<double>(arg) == train.y[i];
  }
  EXPECT_EQ(correct, train.size());
}

TEST(Train, DeterministicForSeed) {
  const auto spec = NetworkSpec::classifier({8}, 2, 2);
  const Dataset d = make_classification(ClassificationKind::two_moons, 120, 0.2, 1);
  TrainConfig c;
  c.epochs = 15;
  c.seed = 9;
  const TrainResult a = train_map(spec, d, c);
  const TrainResult b = train_map(spec, d, c);
  EXPECT_EQ(a.theta.values, b.theta.values);
  c.seed = 10;
  EXPECT_NE(a.theta.values, train_map(spec, d, c).theta.values);
}

TEST(Train, EarlyStoppingNeverWorseThanFinalEpoch) {
  const auto spec = NetworkSpec::classifier({16}, 2, 2);
  const Dataset d = make_classification(ClassificationKind::two_moons, 200, 0.35, 3);
  TrainConfig c;
  c.epochs = 60;
  c.lr = 0.2;
  c.weight_decay = 1e-3;
  c.early_stop_patience = 10;
  const TrainResult r = train_map(spec, d, c);
  ASSERT_FALSE(r.trace.empty());
  const double chosen = point_elpd(spec, r.theta, d.val());
  EXPECT_GE(chosen, r.trace.back().val_elpd);
  for (const auto& e : r.trace) EXPECT_LE(e.val_elpd, chosen + 1e-12);
}

TEST(ConstantSgd, ZeroLearningRateKeepsStart) {
  const auto spec = NetworkSpec::classifier({4}, 2, 2);
  const Dataset d = make_classification(ClassificationKind::two_moons, 60, 0.2, 2);
  const ParamVector start = init_params(spec, 3);
  const auto its = constant_sgd_iterates(spec, d, start, 0.0, 4, TrainConfig{});
  ASSERT_EQ(its.size(), 4u);
  for (const auto& p : its) EXPECT_EQ(p.values, start.values);
  EXPECT_EQ(constant_sgd_iterates(spec, d, start, 0.01, 1, TrainConfig{}).size(), 1u);
}

TEST(ConstantSgd, ScalarQuadraticMatchesRecursion) {
  const double a = 1.7;
  const double c = -0.4;
  const BatchObjective obj = [&](std::span<const Eigen::Index>, const Eigen::VectorXd& t) {
    LossValue v;
    v.nll = 0.5 * a * (t[0] - c) * (t[0] - c);
    v.grad = Eigen::VectorXd::Constant(1, a * (t[0] - c));
    return v;
  };
  const double lr = 0.3;
  const Eigen::VectorXd start = Eigen::VectorXd::Constant(1, 2.0);
  SgdOptions opts;
  opts.batch_size = 5;  // 10 rows -> two steps per epoch
  const auto its = constant_sgd_iterates(obj, start, 10, lr, 6, opts);
  ASSERT_EQ(its.size(), 6u);
  for (int m = 0; m < 6; ++m) {
    const double want = c + std::pow(1.0 - lr * a, 2 * (m + 1)) * (2.0 - c);
    EXPECT_NEAR(its[static_cast<std::size_t>(m)][0], want, 1e-12);
  }
}

TEST(ConstantSgd, DivergenceIsReported) {
  const BatchObjective obj = [](std::span<const Eigen::Index>, const Eigen::VectorXd& t) {
    LossValue v;
    v.nll = 0.5 * 10.0 * t[0] * t[0];
    v.grad = Eigen::VectorXd::Constant(1, 10.0 * t[0]);
    return v;
  };
  EXPECT_THROW(constant_sgd_iterates(obj, Eigen::VectorXd::Ones(1), 64, 5.0, 400, SgdOptions{}),
               DivergenceError);
}

TEST(SampleOutputs, ReusesBodyButMatchesForward) {
  const auto spec = NetworkSpec::classifier({6}, 2, 3);
  Rng rng(4);
  ParamVector a = random_params(spec, rng);
  ParamVector b = a;
  b.head() += Eigen::VectorXd::Ones(b.last_layer.size());
  ParamVector c = random_params(spec, rng);
  const std::vector<ParamVector> samples = {a, b, c};
  const Eigen::MatrixXd x = testing::random_matrix(4, 2, rng);
  const auto outs = sample_outputs(spec, samples, x);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    EXPECT_LT((outs[s] - forward(spec, samples[s], x)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

}  // namespace
}  // namespace debnn
