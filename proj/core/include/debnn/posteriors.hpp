#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "debnn/dataset.hpp"
#include "debnn/nn.hpp"
#include "debnn/radial_flow.hpp"
#include "debnn/rng.hpp"

namespace debnn {

/// Dirac mass at a single parameter vector (MAP or SWA).
struct PointMassPosterior {
  ParamVector center;

  ParamVector sample(Rng&) const { return center; }
};

/// Gaussian N(theta_swa, scale * (Sigma_diag + D D^T / (R - 1)) / 2).
struct SwagPosterior {
  ParamVector theta_swa;
  Eigen::VectorXd sigma_diag;  // elementwise >= 0
  Eigen::MatrixXd deviations;  // P x R, columns theta_m - mean of the last R iterates
  double scale = 1.0;

  int rank() const { return static_cast<int>(deviations.cols()); }

  /// theta_swa + sqrt(scale/2) sqrt(Sigma_diag) z1 + sqrt(scale/(2(R-1))) D z2,
  /// drawing z1 (P normals) before z2 (R normals).
  ParamVector sample(Rng& rng) const;

  /// Dense covariance; only meant for small P.
  Eigen::MatrixXd covariance() const;
};

enum class HessianMode { full, diagonal };

struct CholeskyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Last-layer Laplace approximation: the body is fixed at the MAP and the
/// last layer is N(theta_map^L, scale * (GGN + tau I)^{-1}).
class LllaPosterior {
 public:
  /// `ggn` is D x D in full mode or a D-vector (D x 1) in diagonal mode.
  /// Throws CholeskyError when GGN + tau I is not positive definite.
  LllaPosterior(ParamVector theta_map, Eigen::MatrixXd ggn, double prior_precision,
                HessianMode mode, double scale = 1.0);

  const ParamVector& theta_map() const { return theta_map_; }
  Eigen::VectorXd last_layer_mean() const { return theta_map_.head(); }
  const Eigen::MatrixXd& ggn() const { return ggn_; }
  double prior_precision() const { return prior_precision_; }
  HessianMode mode() const { return mode_; }
  double scale() const { return scale_; }
  Eigen::Index dim() const { return theta_map_.last_layer.size(); }

  /// GGN + tau I as a dense matrix (diagonal mode gives a diagonal matrix).
  Eigen::MatrixXd precision() const;
  /// scale * precision^{-1}.
  Eigen::MatrixXd covariance() const;

  /// Zero-mean draw with covariance scale * precision^{-1}.
  Eigen::VectorXd sample_offset(Rng& rng) const;
  Eigen::VectorXd sample_last_layer(Rng& rng) const;
  ParamVector sample(Rng& rng) const;

  /// log N(theta_l | mean, covariance) over the last layer.
  double log_density(const Eigen::VectorXd& theta_l) const;

  /// Entropy of the last-layer Gaussian (nats).
  double entropy() const;

  LllaPosterior with_scale(double scale) const;

 private:
  ParamVector theta_map_;
  Eigen::MatrixXd ggn_;
  double prior_precision_;
  HessianMode mode_;
  double scale_;
  Eigen::MatrixXd factor_;  // lower Cholesky factor of the precision (full mode)
  Eigen::VectorXd inv_sqrt_diag_;  // diagonal mode
};

/// LLLA base refined by T radial flows acting on the last layer.
struct FlowPosterior {
  LllaPosterior base;
  std::vector<RadialFlow> flows;

  Eigen::VectorXd sample_last_layer(Rng& rng) const;
  ParamVector sample(Rng& rng) const;
  /// log q(theta^L) via the inverse flows and the change of variables.
  double log_density(const Eigen::VectorXd& theta_l) const;
};

using Posterior = std::variant<PointMassPosterior, SwagPosterior, LllaPosterior, FlowPosterior>;

ParamVector sample(const Posterior& post, Rng& rng);
/// Mean of the posterior for SWAG/LLLA/point masses; the flow's base mean.
const ParamVector& center(const Posterior& post);
std::string variant_name(const Posterior& post);

/// Copy whose sampling covariance is `lambda` times the original. Point
/// masses are returned unchanged; for flows only the base is scaled.
Posterior scale_covariance(const Posterior& post, double lambda);

// --- SWAG -----------------------------------------------------------------

/// Mean, diagonal and low-rank estimators over a list of iterates, using the
/// last `rank` iterates for the deviation matrix.
SwagPosterior swag_from_iterates(std::span<const ParamVector> iterates, int rank);

/// Collects `epochs` constant-lr SGD iterates from the MAP and forms SWAG.
SwagPosterior fit_swag(const NetworkSpec& spec, const ParamVector& theta_map, const Dataset& data,
                       double lr, int epochs, int rank, const TrainConfig& config);

PointMassPosterior swa_point(const SwagPosterior& post);

// --- LLLA -----------------------------------------------------------------

/// Per-point Hessian of -log p(y | outputs) w.r.t. the raw outputs. For the
/// Gaussian head the exact 2x2 Hessian is projected onto the PSD cone.
Eigen::MatrixXd output_hessian(const NetworkSpec& spec, const Eigen::RowVectorXd& outputs,
                               double target);

/// Generalized Gauss-Newton of the summed NLL w.r.t. the last layer:
/// sum_n J_n^T Lambda_n J_n (no prior term).
Eigen::MatrixXd last_layer_ggn(const NetworkSpec& spec, const ParamVector& theta,
                               const Batch& batch);

LllaPosterior fit_llla(const NetworkSpec& spec, const ParamVector& theta_map, const Dataset& data,
                       double prior_precision, HessianMode mode);

/// Gaussian push-forward through the last layer followed by the pairwise
/// mean-field probit approximation
///   p_c ~ 1 / (1 + sum_{k != c} exp(-(f_c - f_k) / sqrt(1 + pi/8 Var[f_c - f_k]))),
/// renormalized over classes. For two classes this is the probit
/// approximation of the expected sigmoid.
Eigen::MatrixXd probit_predictive(const NetworkSpec& spec, const LllaPosterior& post,
                                  const Eigen::MatrixXd& x);

/// Mean and covariance of the last-layer outputs per input row.
struct OutputMoments {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd variance;                  // diagonal of each covariance
  std::vector<Eigen::MatrixXd> covariance;  // one outputs x outputs matrix per row
};
OutputMoments last_layer_output_moments(const NetworkSpec& spec, const LllaPosterior& post,
                                        const Eigen::MatrixXd& x);

// --- Flows ----------------------------------------------------------------

/// Unnormalized log target over the last layer and its gradient, evaluated
/// on a minibatch of `rows`.
struct TargetValue {
  double log_density = 0.0;
  Eigen::VectorXd grad;
};
using LastLayerTarget =
    std::function<TargetValue(const Eigen::VectorXd& theta_l, std::span<const Eigen::Index> rows)>;

struct FlowFitOptions {
  int num_flows = 10;
  int epochs = 20;
  double lr = 1e-3;        // Adam, cosine annealed
  int mc_samples = 8;      // base samples per ELBO step
  int batch_size = 32;
  int val_samples = 100;   // samples for per-epoch validation ELPD
  double init_noise = 1e-2;
  std::uint64_t seed = 0;
};

struct FlowFitResult {
  FlowPosterior posterior;
  std::vector<double> elbo_trace;       // per-epoch mean ELBO estimate
  std::vector<double> best_elbo_trace;  // running maximum of elbo_trace
  std::vector<double> val_elpd_trace;   // index 0 = initialization
  int best_epoch = 0;
};

/// Generic ELBO maximization against `target` over `n_rows` rows (the
/// target's minibatch estimate is expected to be unbiased for the full sum).
/// When `validation` is provided, the state with the best validation score
/// (evaluated after every epoch, epoch 0 included) is returned.
FlowFitResult fit_radial_flows(
    const LllaPosterior& base, const LastLayerTarget& target, Eigen::Index n_rows,
    const FlowFitOptions& options,
    const std::function<double(const FlowPosterior&)>& validation = nullptr);

/// Monte Carlo ELBO (plus base entropy) of a flow posterior under `target`
/// over all rows, for diagnostics.
double estimate_elbo(const FlowPosterior& post, const LastLayerTarget& target,
                     Eigen::Index n_rows, int samples, std::uint64_t seed);

/// Flow refinement of an LLLA with the log joint of the training data and
/// an isotropic Gaussian prior with the base's precision; early stopping by
/// validation ELPD.
FlowFitResult fit_flow(const NetworkSpec& spec, const LllaPosterior& base, const Dataset& data,
                       const FlowFitOptions& options);

// --- Tuning ---------------------------------------------------------------

struct TuningTable {
  std::string parameter;
  std::vector<std::string> columns;       // first column is the parameter value
  std::vector<std::vector<double>> rows;  // NaN marks failed fits
  bool operator==(const TuningTable&) const = default;
};

std::vector<double> log_spaced(double lo, double hi, int count);

/// 21 prior precisions evenly spaced in log10 space over [1e-4, 1e4].
std::vector<double> default_prior_precision_grid();
/// 21 constant learning rates log-spaced over [1e-4, 1e-1].
std::vector<double> default_swag_lr_grid();
/// Linear prior-precision grid used for the flow bases.
std::vector<double> default_flow_prior_grid();

enum class SelectionCriterion { monte_carlo, probit };

struct PriorTuneResult {
  double prior_precision = 0.0;
  double val_elpd = 0.0;
  LllaPosterior posterior;
  TuningTable table;
};

/// Fits the GGN once and selects tau by validation ELPD (ties towards larger
/// tau). Monte Carlo selection uses `samples` draws with a common seed for
/// every grid point.
PriorTuneResult tune_prior_precision(const NetworkSpec& spec, const ParamVector& theta_map,
                                     const Dataset& data, std::span<const double> grid,
                                     int samples, std::uint64_t seed,
                                     HessianMode mode = HessianMode::full,
                                     SelectionCriterion criterion = SelectionCriterion::monte_carlo);

struct SwagTuneResult {
  double lr_swag = 0.0;
  double lr_swa = 0.0;
  SwagPosterior swag;      // fitted at lr_swag
  PointMassPosterior swa;  // SWA mean of the fit at lr_swa
  TuningTable table;       // lr, swag val ELPD, swa val ELPD
};

/// One SWAG fit per learning rate; returns the argmax learning rate of both
/// the SWAG predictive and the SWA point (ties towards smaller lr). Diverging
/// learning rates are recorded as NaN rows.
SwagTuneResult tune_swag_lr(const NetworkSpec& spec, const ParamVector& theta_map,
                            const Dataset& data, std::span<const double> grid, int epochs,
                            int rank, int samples, const TrainConfig& config, std::uint64_t seed);

struct FlowTuneResult {
  double prior_precision = 0.0;
  double val_elpd = 0.0;
  FlowPosterior posterior;
  TuningTable table;
};

/// For every base prior precision in `grid`: LLLA base, flow fit, best
/// validation ELPD. Ties towards larger precision.
FlowTuneResult tune_flow(const NetworkSpec& spec, const ParamVector& theta_map,
                         const Dataset& data, std::span<const double> grid,
                         const FlowFitOptions& options, HessianMode mode = HessianMode::full);

/// Validation-style ELPD of a posterior using `samples` draws from `seed`.
double mc_elpd(const NetworkSpec& spec, const Posterior& post, const Batch& batch, int samples,
               std::uint64_t seed);

}  // namespace debnn
