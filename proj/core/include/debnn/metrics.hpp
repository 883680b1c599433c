#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "debnn/dataset.hpp"
#include "debnn/ensemble.hpp"
#include "debnn/nn.hpp"

namespace debnn {

/// Log densities are floored at log(kDensityFloor).
inline constexpr double kDensityFloor = 1e-300;

/// Monte Carlo predictive over a batch of inputs.
struct PredictiveResult {
  TaskKind task = TaskKind::classification;
  Eigen::MatrixXd probs;      // classification: N x C averaged probabilities
  Eigen::MatrixXd means;      // regression: N x S component means
  Eigen::MatrixXd variances;  // regression: N x S component variances
  Eigen::VectorXd weights;    // S sample weights, sum to one

  // Present once targets are attached.
  std::optional<Eigen::VectorXd> log_density;  // N, floored
  Eigen::MatrixXd sample_log_lik;              // N x S, log p(y_n | theta_s)
  std::vector<int> sample_component;           // stratum of each sample (may be empty)

  Eigen::Index rows() const;
  Eigen::Index samples() const { return weights.size(); }
};

/// Weighted average of the per-sample predictives. Without targets only the
/// distribution is filled in.
PredictiveResult predictive(const NetworkSpec& spec, std::span<const ParamVector> samples,
                            std::span<const double> weights, const Eigen::MatrixXd& x);
PredictiveResult predictive(const NetworkSpec& spec, const SampleBatch& batch,
                            const Eigen::MatrixXd& x);
/// Same, with targets attached.
PredictiveResult predictive(const NetworkSpec& spec, const SampleBatch& batch, const Batch& data);

/// Fills log_density (and sample_log_lik when the per-sample outputs are
/// known) for targets `y`.
void attach_targets(const NetworkSpec& spec, PredictiveResult& pred,
                    const std::vector<Eigen::MatrixXd>& outputs, const Eigen::VectorXd& y);

/// Classification predictive from explicit probabilities (e.g. probit),
/// with log densities of `y`.
PredictiveResult predictive_from_probs(Eigen::MatrixXd probs, const Eigen::VectorXd& y);

double elpd(const PredictiveResult& pred);
double accuracy(const PredictiveResult& pred, const Eigen::VectorXd& y);
/// -mean |mixture mean - y|.
double n_mae(const PredictiveResult& pred, const Eigen::VectorXd& y);
/// Mixture mean per row (regression).
Eigen::VectorXd mixture_mean(const PredictiveResult& pred);
/// Mixture variance per row: mean of variances plus scatter of the means.
Eigen::VectorXd mixture_variance(const PredictiveResult& pred);

/// Equal-width confidence bins on (0, 1], each bin (lo, hi].
double ece(const PredictiveResult& pred, const Eigen::VectorXd& y, int n_bins = 15);
double ece_from_confidences(std::span<const double> confidence, std::span<const bool> correct,
                            int n_bins = 15);

/// Predictive entropy (classification) or log mixture variance (regression).
Eigen::VectorXd ood_score(const PredictiveResult& pred);
std::string ood_score_name(TaskKind task);

/// P(ood > id) + P(ood = id) / 2 from average ranks.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Delta-method standard error of the ELPD estimate due to Monte Carlo
/// sampling. Samples sharing a stratum (sample_component) are pooled within
/// it; point-mass strata contribute nothing.
double elpd_mc_standard_error(const PredictiveResult& pred);

struct MetricsReport {
  std::string experiment;
  std::string method;
  int k = 0;
  int samples = 0;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  int draw = 0;
  std::string sampling = "stratified";  // stratified | iid | probit
  std::string task = "classification";

  double elpd = 0.0;
  double elpd_se = 0.0;  // Monte Carlo standard error
  std::optional<double> accuracy;
  std::optional<double> n_mae;
  std::optional<double> ece;
  std::optional<double> auroc;
  int ece_bins = 15;
  std::string ood_score = "";

  bool operator==(const MetricsReport&) const = default;
};

/// Fixed CSV column set shared by every report.
std::vector<std::string> metrics_csv_header();
std::vector<std::string> metrics_csv_row(const MetricsReport& r);

/// Metrics of `pred` against `y`; the metadata fields are left to the caller.
MetricsReport evaluate_predictive(const PredictiveResult& pred, const Eigen::VectorXd& y,
                                  int ece_bins = 15);

}  // namespace debnn
