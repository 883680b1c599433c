#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "debnn/dataset.hpp"
#include "debnn/rng.hpp"

namespace debnn {

enum class Activation { tanh, relu };
enum class HeadKind { classifier, heteroscedastic_regressor };

/// Floor added to softplus(raw) so predicted variances stay positive.
inline constexpr double kVarianceFloor = 1e-6;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when a loss or iterate becomes non-finite.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense feed-forward network layout. `layer_widths` lists every layer
/// including input and output, so {2, 64, 64, 3} has three affine maps.
struct NetworkSpec {
  std::vector<int> layer_widths;
  Activation activation = Activation::tanh;
  HeadKind head = HeadKind::classifier;
  int num_classes = 0;

  static NetworkSpec classifier(std::vector<int> hidden, int input_width, int num_classes,
                                Activation act = Activation::tanh);
  static NetworkSpec regressor(std::vector<int> hidden, int input_width,
                               Activation act = Activation::tanh);

  int input_width() const { return layer_widths.front(); }
  int output_width() const { return layer_widths.back(); }
  int num_affine() const { return static_cast<int>(layer_widths.size()) - 1; }
  int penultimate_width() const { return layer_widths[layer_widths.size() - 2]; }

  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

/// Half-open index range [begin, end) into a flat parameter vector.
struct Partition {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
  bool operator==(const Partition&) const = default;
};

/// Flat parameters. Layout per affine map: weights row-major (out x in), then
/// bias (out). `last_layer` covers the final map's weights and bias.
struct ParamVector {
  Eigen::VectorXd values;
  Partition last_layer;

  Eigen::Index size() const { return values.size(); }
  auto head() const { return values.segment(last_layer.begin, last_layer.size()); }
  auto head() { return values.segment(last_layer.begin, last_layer.size()); }
  auto body() const { return values.head(last_layer.begin); }
};

Eigen::Index param_count(const NetworkSpec& spec);
Partition last_layer_partition(const NetworkSpec& spec);

/// Scaled uniform fan-in initialization: every weight and bias of a map with
/// fan-in m is drawn from U(-1/sqrt(m), 1/sqrt(m)).
ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed);

/// Checks length and partition against the spec.
void check_params(const NetworkSpec& spec, const ParamVector& theta);

/// Penultimate activations (N x penultimate_width). For a single affine map
/// this is the input itself.
Eigen::MatrixXd features(const NetworkSpec& spec, const ParamVector& theta,
                         const Eigen::MatrixXd& x);

/// Applies the final affine map to penultimate features.
Eigen::MatrixXd head_outputs(const NetworkSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& head,
                             const Eigen::MatrixXd& phi);

/// Raw network outputs: logits (classifier) or (mean, raw variance) columns.
Eigen::MatrixXd forward(const NetworkSpec& spec, const ParamVector& theta,
                        const Eigen::MatrixXd& x);

double softplus(double x);
double sigmoid(double x);
inline double variance_from_raw(double raw) { return softplus(raw) + kVarianceFloor; }

/// Per-row log p(y | outputs) under the spec's likelihood.
Eigen::VectorXd log_likelihood(const NetworkSpec& spec, const Eigen::MatrixXd& outputs,
                               const Eigen::VectorXd& y);

struct LossValue {
  double nll = 0.0;      // mean negative log likelihood over the batch
  double penalty = 0.0;  // weight_decay / (2 n_total) * |theta|^2
  Eigen::VectorXd grad;  // gradient of nll + penalty

  double objective() const { return nll + penalty; }
};

/// Mean NLL of the batch plus the weight-decay term, and its exact
/// reverse-mode gradient. `n_total` is the dataset size used to scale the
/// prior term into a per-datapoint objective; 0 means the batch size.
LossValue nll_and_grad(const NetworkSpec& spec, const ParamVector& theta, const Batch& batch,
                       double weight_decay, Eigen::Index n_total = 0);

enum class LrSchedule { cosine, constant };

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1.0;
  LrSchedule lr_schedule = LrSchedule::cosine;
  std::optional<int> early_stop_patience = 50;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
  int epoch = 0;
  double train_nll = 0.0;
  double val_elpd = 0.0;
};

struct TrainResult {
  ParamVector theta;
  std::vector<EpochRecord> trace;
  int best_epoch = 0;  // 0 = initialization
};

/// Mini-batch SGD with momentum towards the MAP. With early stopping enabled
/// the snapshot with the best point-estimate validation ELPD is returned.
TrainResult train_map(const NetworkSpec& spec, const Dataset& data, const TrainConfig& config);

/// Objective over a subset of training rows, used by the generic SGD loop.
using BatchObjective =
    std::function<LossValue(std::span<const Eigen::Index> rows, const Eigen::VectorXd& theta)>;

struct SgdOptions {
  int batch_size = 32;
  double momentum = 0.0;
  std::uint64_t seed = 0;
};

/// Runs `epochs` epochs of constant-learning-rate SGD over `n_rows` rows and
/// returns the iterate after each epoch. Throws DivergenceError naming the
/// learning rate on a non-finite loss or iterate.
std::vector<Eigen::VectorXd> constant_sgd_iterates(const BatchObjective& objective,
                                                   const Eigen::VectorXd& theta_start,
                                                   Eigen::Index n_rows, double lr, int epochs,
                                                   const SgdOptions& options);

/// Network form: SGD on the training split with the MAP weight decay.
std::vector<ParamVector> constant_sgd_iterates(const NetworkSpec& spec, const Dataset& data,
                                               const ParamVector& theta_start, double lr,
                                               int epochs, const TrainConfig& config);

/// Raw outputs for each parameter sample. Penultimate features are reused
/// across consecutive samples whose body (non-last-layer) parameters are
/// identical, which makes last-layer posteriors and point masses cheap.
std::vector<Eigen::MatrixXd> sample_outputs(const NetworkSpec& spec,
                                            std::span<const ParamVector> samples,
                                            const Eigen::MatrixXd& x);

/// log p(y_n | theta_s) as a (rows x samples) matrix.
Eigen::MatrixXd sample_log_likelihoods(const NetworkSpec& spec,
                                       std::span<const ParamVector> samples, const Batch& batch);

/// Mean over rows of log mean_s exp(sample_ll(n, s)).
double mc_elpd(const Eigen::MatrixXd& sample_ll);

/// Validation ELPD of a single parameter vector (point predictive).
double point_elpd(const NetworkSpec& spec, const ParamVector& theta, const Batch& batch);

std::string to_string(Activation a);
std::string to_string(HeadKind h);
std::string to_string(LrSchedule s);
Activation activation_from_string(const std::string& s);
HeadKind head_from_string(const std::string& s);
LrSchedule schedule_from_string(const std::string& s);

}  // namespace debnn
