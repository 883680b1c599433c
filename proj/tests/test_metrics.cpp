#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "debnn/metrics.hpp"
#include "support.hpp"

namespace debnn {
namespace {

PredictiveResult from_probs(const Eigen::MatrixXd& p, const Eigen::VectorXd& y) {
  return predictive_from_probs(p, y);
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  return p.array().colwise() / p.rowwise().sum().array();
}

// Regression predictive with given per-sample means and variances.
PredictiveResult regression_pred(const Eigen::MatrixXd& means, const Eigen::MatrixXd& vars,
                                 const Eigen::VectorXd& y) {
  const NetworkSpec spec{{1, 2}, Activation::tanh, HeadKind::heteroscedastic_regressor, 0};
  std::vector<ParamVector> samples;
  std::vector<Eigen::MatrixXd> outputs;
  for (Eigen::Index s = 0; s < means.cols(); ++s) {
    Eigen::MatrixXd out(means.rows(), 2);
    out.col(0) = means.col(s);
    for (Eigen::Index n = 0; n < means.rows(); ++n) {
      out(n, 1) = std::log(std::expm1(vars(n, s) - kVarianceFloor));
    }
    outputs.push_back(out);
  }
  PredictiveResult pred;
  pred.task = TaskKind::regression;
  pred.means = means;
  pred.variances = vars;
  pred.weights = Eigen::VectorXd::Constant(means.cols(), 1.0 / static_cast<double>(means.cols()));
  attach_targets(spec, pred, outputs, y);
  return pred;
}

TEST(Predictive, SingleSampleIsThatSample) {
  const auto spec = NetworkSpec::classifier({5}, 2, 3);
  Rng rng(1);
  const ParamVector theta = testing::random_params(spec, rng);
  const Eigen::MatrixXd x = testing::random_matrix(6, 2, rng);
  const std::vector<ParamVector> one = {theta};
  const std::vector<double> w = {1.0};
  const PredictiveResult p = predictive(spec, one, w, x);
  EXPECT_LT((p.probs - softmax_rows(forward(spec, theta, x))).cwiseAbs().maxCoeff(), 1e-15);
  const std::vector<ParamVector> same(4, theta);
  const std::vector<double> w4(4, 0.25);
  EXPECT_LT((predictive(spec, same, w4, x).probs - p.probs).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Predictive, AveragesSampleProbabilities) {
  const auto spec = NetworkSpec::classifier({5}, 2, 3);
  Rng rng(2);
  const std::vector<ParamVector> samples = {testing::random_params(spec, rng),
                                            testing::random_params(spec, rng),
                                            testing::random_params(spec, rng)};
  const std::vector<double> w = {0.2, 0.5, 0.3};
  const Eigen::MatrixXd x = testing::random_matrix(8, 2, rng);
  Eigen::MatrixXd want = Eigen::MatrixXd::Zero(8, 3);
  for (std::size_t s = 0; s < 3; ++s) want += w[s] * softmax_rows(forward(spec, samples[s], x));
  const PredictiveResult p = predictive(spec, samples, w, x);
  EXPECT_LT((p.probs - want).cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index n = 0; n < 8; ++n) EXPECT_NEAR(p.probs.row(n).sum(), 1.0, 1e-9);
}

TEST(Predictive, PointMassEnsembleElpdIsLogMeanMemberProbability) {
  const auto spec = NetworkSpec::classifier({4}, 2, 3);
  Rng rng(3);
  std::vector<PosteriorHandle> members;
  for (int k = 0; k < 4; ++k) {
    members.push_back({spec, PointMassPosterior{testing::random_params(spec, rng)}, "m", "de", {}});
  }
  const Batch batch = testing::random_batch(spec, 15, rng);
  const MixturePosterior mix = build_mixture(members);
  const PredictiveResult pred = predictive(spec, stratified_sample(mix, 40, 9), batch);
  double want = 0.0;
  for (Eigen::Index n = 0; n < batch.size(); ++n) {
    double mean = 0.0;
    for (const auto& m : members) {
      const Eigen::MatrixXd p = softmax_rows(forward(spec, center(m.posterior), batch.x.row(n)));
      mean += p(0, static_cast<Eigen::Index>(batch.y[n])) / 4.0;
    }
    want += std::log(mean);
  }
  want /= static_cast<double>(batch.size());
  EXPECT_NEAR(elpd(pred), want, 1e-12);
  EXPECT_EQ(elpd_mc_standard_error(pred), 0.0);
}

TEST(Elpd, UniformAndOneHot) {
  const Eigen::VectorXd y = (Eigen::VectorXd(4) << 0, 3, 9, 5).finished();
  EXPECT_NEAR(elpd(from_probs(Eigen::MatrixXd::Constant(4, 10, 0.1), y)), -std::log(10.0), 1e-15);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(4, 10);
  for (int n = 0; n < 4; ++n) onehot(n, static_cast<Eigen::Index>(y[n])) = 1.0;
  EXPECT_EQ(elpd(from_probs(onehot, y)), 0.0);
}

TEST(Elpd, FloorsZeroProbability) {
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(1);
  Eigen::MatrixXd p(1, 2);
  p << 0.0, 1.0;
  EXPECT_EQ(elpd(from_probs(p, y)), std::log(kDensityFloor));
}

TEST(Elpd, TwoGaussianMixture) {
  Eigen::MatrixXd means(1, 2), vars(1, 2);
  means << 0.3, -1.1;
  vars << 0.5, 2.0;
  const double y = 0.1;
  const PredictiveResult pred = regression_pred(means, vars, Eigen::VectorXd::Constant(1, y));
  const auto logn = [](double y, double m, double v) {
    return -0.5 * std::log(2 * std::numbers::pi * v) - 0.5 * (y - m) * (y - m) / v;
  };
  const double a = logn(y, 0.3, 0.5) + std::log(0.5);
  const double b = logn(y, -1.1, 2.0) + std::log(0.5);
  const double top = std::max(a, b);
  EXPECT_NEAR(elpd(pred), top + std::log(std::exp(a - top) + std::exp(b - top)), 1e-12);
}

TEST(Accuracy, Cases) {
  Eigen::MatrixXd p(4, 2);
  p << 0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7;
  const Eigen::VectorXd all = (Eigen::VectorXd(4) << 0, 1, 0, 1).finished();
  const Eigen::VectorXd half = (Eigen::VectorXd(4) << 0, 1, 1, 0).finished();
  EXPECT_EQ(accuracy(from_probs(p, all), all), 1.0);
  EXPECT_EQ(accuracy(from_probs(p, half), half), 0.5);
}

TEST(NMae, ZeroAtTargetsAndVarianceFree) {
  Eigen::MatrixXd means(3, 2);
  means << 1, 1, 2, 2, -0.5, -0.5;
  const Eigen::VectorXd y = means.col(0);
  EXPECT_EQ(n_mae(regression_pred(means, Eigen::MatrixXd::Ones(3, 2), y), y), 0.0);
  means.col(1).array() += 1.0;
  const Eigen::VectorXd y2 = Eigen::VectorXd::Zero(3);
  const double a = n_mae(regression_pred(means, Eigen::MatrixXd::Constant(3, 2, 0.1), y2), y2);
  const double b = n_mae(regression_pred(means, Eigen::MatrixXd::Constant(3, 2, 9.0), y2), y2);
  EXPECT_EQ(a, b);
}

TEST(Ece, Examples) {
  const std::vector<double> ones(5, 1.0);
  const bool all[] = {true, true, true, true, true};
  EXPECT_EQ(ece_from_confidences(ones, all), 0.0);
  const std::vector<double> c(4, 0.8);
  const bool three[] = {true, true, true, false};
  EXPECT_NEAR(ece_from_confidences(c, three), 0.05, 1e-15);
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(4, 2, 0.5);
  // argmax of a tie is class 0; two of four targets are class 0.
  const Eigen::VectorXd y = (Eigen::VectorXd(4) << 0, 1, 0, 1).finished();
  EXPECT_EQ(ece(from_probs(p, y), y), 0.0);
}

TEST(Ece, PermutationInvariantAndBounded) {
  Rng rng(4);
  std::vector<double> conf(200);
  bool correct[200];
  for (int i = 0; i < 200; ++i) {
    conf[static_cast<std::size_t>(i)] = 0.5 + 0.5 * rng.uniform();
    correct[i] = rng.uniform() < 0.3;
  }
  const double e = ece_from_confidences(conf, correct);
  EXPECT_GE(e, 0.0);
  EXPECT_LE(e, 1.0);
  std::vector<std::size_t> perm(200);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  std::vector<double> conf2(200);
  bool correct2[200];
  for (std::size_t i = 0; i < 200; ++i) {
    conf2[i] = conf[perm[i]];
    correct2[i] = correct[perm[i]];
  }
  EXPECT_NEAR(ece_from_confidences(conf2, correct2), e, 1e-15);
}

TEST(Ece, CalibratedStreamIsNearZero) {
  Rng rng(5);
  const int n = 200000;
  std::vector<double> conf(n);
  std::unique_ptr<bool[]> correct(new bool[n]);
  for (int i = 0; i < n; ++i) {
    conf[static_cast<std::size_t>(i)] = 0.5 + 0.5 * rng.uniform();
    correct[i] = rng.uniform() < conf[static_cast<std::size_t>(i)];
  }
  // Binomial noise per bin is about sqrt(0.25 / (n / 8)).
  EXPECT_LT(ece_from_confidences(conf, std::span<const bool>(correct.get(), n)), 0.01);
}

TEST(OodScore, EntropyAndTotalVariance) {
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(2, 3);
  onehot(0, 1) = onehot(1, 2) = 1.0;
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(2);
  EXPECT_TRUE(ood_score(from_probs(onehot, y)).isZero(0.0));
  const Eigen::VectorXd u = ood_score(from_probs(Eigen::MatrixXd::Constant(2, 3, 1.0 / 3), y));
  EXPECT_NEAR(u[0], std::log(3.0), 1e-15);

  Eigen::MatrixXd means(1, 2), vars(1, 2);
  means << 1.0, 3.0;
  vars << 0.5, 1.5;
  const PredictiveResult r = regression_pred(means, vars, Eigen::VectorXd::Zero(1));
  // Law of total variance: mean of variances + variance of means.
  const double total = 0.5 * (0.5 + 1.5) + (0.5 * (1 + 9) - 4.0);
  EXPECT_NEAR(mixture_variance(r)[0], total, 1e-12);
  EXPECT_NEAR(ood_score(r)[0], std::log(total), 1e-12);
}

double brute_auroc(const std::vector<double>& id, const std::vector<double>& ood) {
  double count = 0.0;
  for (double o : ood) {
    for (double i : id) count += o > i ? 1.0 : (o == i ? 0.5 : 0.0);
  }
  return count / static_cast<double>(id.size() * ood.size());
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.3}, std::vector<double>{0.5, 0.6}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>(4, 1.0), std::vector<double>(3, 1.0)), 0.5);
  const std::vector<double> id = {0.3, 0.7, 0.5}, ood = {0.6, 0.3, 0.9};
  EXPECT_EQ(auroc(id, ood), brute_auroc(id, ood));
}

TEST(Auroc, MatchesPairwiseCountOnRandomLists) {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> id(10), ood(10);
    // Coarse values so ties occur.
    for (double& v : id) v = static_cast<double>(rng.below(8));
    for (double& v : ood) v = static_cast<double>(rng.below(8)) + 0.5 * static_cast<double>(rng.below(2));
    EXPECT_EQ(auroc(id, ood), brute_auroc(id, ood));
  }
}

TEST(Auroc, InvariantUnderIncreasingMaps) {
  Rng rng(7);
  std::vector<double> id(30), ood(25);
  for (double& v : id) v = rng.normal();
  for (double& v : ood) v = rng.normal() + 0.5;
  const double base = auroc(id, ood);
  const auto map = [](std::vector<double> v, auto f) {
    for (double& x : v) x = f(x);
    return v;
  };
  const auto ex = [](double x) { return std::exp(x); };
  const auto aff = [](double x) { return 3.0 * x - 2.0; };
  EXPECT_EQ(auroc(map(id, ex), map(ood, ex)), base);
  EXPECT_EQ(auroc(map(id, aff), map(ood, aff)), base);
}

TEST(Report, CsvRowMatchesHeader) {
  MetricsReport r;
  r.accuracy = 0.9;
  EXPECT_EQ(metrics_csv_row(r).size(), metrics_csv_header().size());
}

TEST(McStandardError, ShrinksWithSamples) {
  const auto spec = NetworkSpec::classifier({4}, 2, 2);
  Rng rng(8);
  ParamVector theta = testing::random_params(spec, rng);
  const MixturePosterior mix = build_mixture(std::vector<PosteriorHandle>{
      {spec, SwagPosterior{theta, Eigen::VectorXd::Constant(theta.size(), 0.3),
                           Eigen::MatrixXd::Zero(theta.size(), 2)}, "m", "swag", {}}});
  const Batch batch = testing::random_batch(spec, 50, rng);
  const double small = elpd_mc_standard_error(predictive(spec, stratified_sample(mix, 20, 1), batch));
  const double large = elpd_mc_standard_error(predictive(spec, stratified_sample(mix, 2000, 1), batch));
  EXPECT_GT(small, 0.0);
  EXPECT_NEAR(large / small, std::sqrt(20.0 / 2000.0), 0.5 * std::sqrt(20.0 / 2000.0));
}

}  // namespace
}  // namespace debnn
