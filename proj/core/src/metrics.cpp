#include "debnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdio>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace debnn {

namespace {

const double kLogFloor = std::log(kDensityFloor);

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

void require_targets(const PredictiveResult& pred, const Eigen::VectorXd& y) {
  if (y.size() != pred.rows()) throw ShapeError("targets and predictive differ in length");
}

}  // namespace

Eigen::Index PredictiveResult::rows() const {
  return task == TaskKind::classification ? probs.rows() : means.rows();
}

namespace {

PredictiveResult from_outputs(const NetworkSpec& spec, const std::vector<Eigen::MatrixXd>& outputs,
                              std::span<const double> weights, Eigen::Index rows) {
  if (outputs.empty()) throw std::invalid_argument("predictive needs at least one sample");
  if (weights.size() != outputs.size()) throw ShapeError("one weight per sample required");
  PredictiveResult pred;
  pred.weights = Eigen::Map<const Eigen::VectorXd>(weights.data(),
                                                   static_cast<Eigen::Index>(weights.size()));
  const auto s_count = static_cast<Eigen::Index>(outputs.size());
  if (spec.head == HeadKind::classifier) {
    pred.task = TaskKind::classification;
    pred.probs = Eigen::MatrixXd::Zero(rows, spec.output_width());
    for (Eigen::Index s = 0; s < s_count; ++s) {
      const Eigen::MatrixXd& o = outputs[static_cast<std::size_t>(s)];
      for (Eigen::Index n = 0; n < o.rows(); ++n) {
        Eigen::RowVectorXd p = (o.row(n).array() - o.row(n).maxCoeff()).exp();
        pred.probs.row(n) += pred.weights[s] * p / p.sum();
      }
    }
    // Renormalize away rounding in the weighted sum.
    pred.probs.array().colwise() /= pred.probs.rowwise().sum().array();
  } else {
    pred.task = TaskKind::regression;
    pred.means.resize(rows, s_count);
    pred.variances.resize(rows, s_count);
    for (Eigen::Index s = 0; s < s_count; ++s) {
      const Eigen::MatrixXd& o = outputs[static_cast<std::size_t>(s)];
      pred.means.col(s) = o.col(0);
      pred.variances.col(s) = o.col(1).unaryExpr([](double r) { return variance_from_raw(r); });
    }
  }
  return pred;
}

}  // namespace

PredictiveResult predictive(const NetworkSpec& spec, std::span<const ParamVector> samples,
                            std::span<const double> weights, const Eigen::MatrixXd& x) {
  if (samples.empty()) throw std::invalid_argument("predictive needs at least one sample");
  return from_outputs(spec, sample_outputs(spec, samples, x), weights, x.rows());
}

PredictiveResult predictive(const NetworkSpec& spec, const SampleBatch& batch,
                            const Eigen::MatrixXd& x) {
  PredictiveResult pred = predictive(spec, batch.samples, batch.weights, x);
  pred.sample_component = batch.component;
  return pred;
}

PredictiveResult predictive(const NetworkSpec& spec, const SampleBatch& batch, const Batch& data) {
  if (batch.samples.empty()) throw std::invalid_argument("predictive needs at least one sample");
  const auto outputs = sample_outputs(spec, batch.samples, data.x);
  PredictiveResult pred = from_outputs(spec, outputs, batch.weights, data.x.rows());
  pred.sample_component = batch.component;
  attach_targets(spec, pred, outputs, data.y);
  return pred;
}

void attach_targets(const NetworkSpec& spec, PredictiveResult& pred,
                    const std::vector<Eigen::MatrixXd>& outputs, const Eigen::VectorXd& y) {
  require_targets(pred, y);
  const Eigen::Index n = pred.rows();
  const Eigen::Index s_count = pred.samples();
  if (static_cast<Eigen::Index>(outputs.size()) != s_count) {
    throw ShapeError("one output matrix per sample required");
  }
  pred.sample_log_lik.resize(n, s_count);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    pred.sample_log_lik.col(s) = log_likelihood(spec, outputs[static_cast<std::size_t>(s)], y);
  }
  const Eigen::ArrayXd log_w = pred.weights.array().log();
  Eigen::VectorXd ld(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::ArrayXd terms = pred.sample_log_lik.row(i).transpose().array() + log_w;
    const double m = terms.maxCoeff();
    const double v = std::isfinite(m) ? m + std::log((terms - m).exp().sum()) : m;
    ld[i] = std::max(v, kLogFloor);
  }
  pred.log_density = std::move(ld);
}

PredictiveResult predictive_from_probs(Eigen::MatrixXd probs, const Eigen::VectorXd& y) {
  PredictiveResult pred;
  pred.task = TaskKind::classification;
  pred.probs = std::move(probs);
  pred.weights = Eigen::VectorXd::Ones(1);
  require_targets(pred, y);
  Eigen::VectorXd ld(pred.rows());
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const double p = pred.probs(i, static_cast<Eigen::Index>(y[i]));
    ld[i] = std::log(std::max(p, kDensityFloor));
  }
  pred.sample_log_lik = ld;
  pred.log_density = std::move(ld);
  return pred;
}

double elpd(const PredictiveResult& pred) {
  if (!pred.log_density) throw std::invalid_argument("ELPD needs targets");
  return pred.log_density->mean();
}

double accuracy(const PredictiveResult& pred, const Eigen::VectorXd& y) {
  if (pred.task != TaskKind::classification) throw std::invalid_argument("accuracy needs classes");
  require_targets(pred, y);
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    Eigen::Index arg = 0;
    pred.probs.row(i).maxCoeff(&arg);  // first maximum on ties
    if (arg == static_cast<Eigen::Index>(y[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pred.rows());
}

Eigen::VectorXd mixture_mean(const PredictiveResult& pred) {
  if (pred.task != TaskKind::regression) throw std::invalid_argument("mixture mean needs regression");
  return pred.means * pred.weights;
}

Eigen::VectorXd mixture_variance(const PredictiveResult& pred) {
  const Eigen::VectorXd mean = mixture_mean(pred);
  const Eigen::MatrixXd scatter = (pred.means.colwise() - mean).array().square().matrix();
  return (pred.variances + scatter) * pred.weights;
}

double n_mae(const PredictiveResult& pred, const Eigen::VectorXd& y) {
  require_targets(pred, y);
  return -(mixture_mean(pred) - y).cwiseAbs().mean();
}

double ece_from_confidences(std::span<const double> confidence, std::span<const bool> correct,
                            int n_bins) {
  if (n_bins < 1) throw std::invalid_argument("ECE needs at least one bin");
  if (confidence.size() != correct.size()) throw ShapeError("confidence/correct length mismatch");
  if (confidence.empty()) throw std::invalid_argument("ECE needs at least one point");
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> hits(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> count(static_cast<std::size_t>(n_bins), 0.0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    // Bin b covers (b/B, (b+1)/B]; a confidence of exactly 0 joins bin 0.
    int b = static_cast<int>(std::ceil(c * n_bins)) - 1;
    b = std::clamp(b, 0, n_bins - 1);
    conf_sum[static_cast<std::size_t>(b)] += c;
    hits[static_cast<std::size_t>(b)] += correct[i] ? 1.0 : 0.0;
    count[static_cast<std::size_t>(b)] += 1.0;
  }
  const double n = static_cast<double>(confidence.size());
  double total = 0.0;
  for (std::size_t b = 0; b < count.size(); ++b) {
    if (count[b] == 0.0) continue;
    total += count[b] / n * std::abs(hits[b] / count[b] - conf_sum[b] / count[b]);
  }
  return total;
}

double ece(const PredictiveResult& pred, const Eigen::VectorXd& y, int n_bins) {
  if (pred.task != TaskKind::classification) throw std::invalid_argument("ECE needs classification");
  require_targets(pred, y);
  std::vector<double> conf(static_cast<std::size_t>(pred.rows()));
  std::unique_ptr<bool[]> correct(new bool[conf.size()]);
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    Eigen::Index arg = 0;
    conf[static_cast<std::size_t>(i)] = pred.probs.row(i).maxCoeff(&arg);
    correct[static_cast<std::size_t>(i)] = arg == static_cast<Eigen::Index>(y[i]);
  }
  return ece_from_confidences(conf, std::span<const bool>(correct.get(), conf.size()), n_bins);
}

Eigen::VectorXd ood_score(const PredictiveResult& pred) {
  if (pred.task == TaskKind::classification) {
    Eigen::VectorXd h(pred.rows());
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      double e = 0.0;
      for (Eigen::Index c = 0; c < pred.probs.cols(); ++c) {
        const double p = pred.probs(i, c);
        if (p > 0.0) e -= p * std::log(p);
      }
      h[i] = e;
    }
    return h;
  }
  return mixture_variance(pred).array().log();
}

std::string ood_score_name(TaskKind task) {
  return task == TaskKind::classification ? "predictive_entropy" : "log_total_variance";
}

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw std::invalid_argument("AUROC needs both groups");
  const std::size_t n = id_scores.size() + ood_scores.size();
  std::vector<std::pair<double, bool>> all;
  all.reserve(n);
  for (double s : id_scores) all.emplace_back(s, false);
  for (double s : ood_scores) all.emplace_back(s, true);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  // Sum of average ranks of the OOD group (ranks start at 1).
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (all[t].second) rank_sum += avg_rank;
    }
    i = j;
  }
  const auto m = static_cast<double>(ood_scores.size());
  const double u = rank_sum - m * (m + 1.0) / 2.0;
  return u / (m * static_cast<double>(id_scores.size()));
}

double elpd_mc_standard_error(const PredictiveResult& pred) {
  if (!pred.log_density) throw std::invalid_argument("MC standard error needs targets");
  const Eigen::Index s_count = pred.samples();
  if (pred.sample_log_lik.cols() != s_count || s_count < 2) return 0.0;
  // a_s = (1/N) sum_n p_ns / pbar_n; ELPD-hat - ELPD ~ sum_s w_s (a_s - E a).
  const Eigen::MatrixXd ratio =
      (pred.sample_log_lik.colwise() - *pred.log_density).array().exp().matrix();
  // Plain loops: Eigen's vectorized column sums depend on each column's
  // alignment, which would make identical samples differ in the last bit.
  Eigen::VectorXd a(s_count);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    double total = 0.0;
    for (Eigen::Index n = 0; n < ratio.rows(); ++n) total += ratio(n, s);
    a[s] = total / static_cast<double>(ratio.rows());
  }

  std::vector<int> stratum = pred.sample_component;
  if (static_cast<Eigen::Index>(stratum.size()) != s_count) stratum.assign(static_cast<std::size_t>(s_count), 0);
  const int n_strata = *std::max_element(stratum.begin(), stratum.end()) + 1;
  // Values are shifted by the first member of their stratum, so a stratum of
  // identical samples has exactly zero variance.
  std::vector<double> shift(static_cast<std::size_t>(n_strata), std::numeric_limits<double>::quiet_NaN());
  std::vector<double> sum(static_cast<std::size_t>(n_strata), 0.0);
  std::vector<double> count(static_cast<std::size_t>(n_strata), 0.0);
  std::vector<double> w2(static_cast<std::size_t>(n_strata), 0.0);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const auto k = static_cast<std::size_t>(stratum[static_cast<std::size_t>(s)]);
    if (std::isnan(shift[k])) shift[k] = a[s];
    sum[k] += a[s] - shift[k];
    count[k] += 1.0;
    w2[k] += pred.weights[s] * pred.weights[s];
  }
  std::vector<double> sq(static_cast<std::size_t>(n_strata), 0.0);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const auto k = static_cast<std::size_t>(stratum[static_cast<std::size_t>(s)]);
    const double d = a[s] - shift[k] - sum[k] / count[k];
    sq[k] += d * d;
  }
  double var = 0.0;
  for (std::size_t k = 0; k < sum.size(); ++k) {
    if (count[k] < 2.0) continue;
    var += w2[k] * sq[k] / (count[k] - 1.0);
  }
  return std::sqrt(var);
}

std::vector<std::string> metrics_csv_header() {
  return {"experiment", "method", "k",        "samples", "lambda", "seed",     "draw",
          "sampling",   "task",   "elpd",     "elpd_se", "accuracy", "n_mae",  "ece",
          "auroc",      "ece_bins", "ood_score"};
}

std::vector<std::string> metrics_csv_row(const MetricsReport& r) {
  return {r.experiment,
          r.method,
          std::to_string(r.k),
          std::to_string(r.samples),
          format_double(r.lambda),
          std::to_string(r.seed),
          std::to_string(r.draw),
          r.sampling,
          r.task,
          format_double(r.elpd),
          format_double(r.elpd_se),
          format_optional(r.accuracy),
          format_optional(r.n_mae),
          format_optional(r.ece),
          format_optional(r.auroc),
          std::to_string(r.ece_bins),
          r.ood_score};
}

MetricsReport evaluate_predictive(const PredictiveResult& pred, const Eigen::VectorXd& y,
                                  int ece_bins) {
  MetricsReport r;
  r.elpd = elpd(pred);
  r.elpd_se = elpd_mc_standard_error(pred);
  r.samples = static_cast<int>(pred.samples());
  r.ece_bins = ece_bins;
  r.ood_score = ood_score_name(pred.task);
  if (pred.task == TaskKind::classification) {
    r.task = "classification";
    r.accuracy = accuracy(pred, y);
    r.ece = ece(pred, y, ece_bins);
  } else {
    r.task = "regression";
    r.n_mae = n_mae(pred, y);
  }
  return r;
}

}  // namespace debnn
