#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "debnn/nn.hpp"
#include "debnn/posteriors.hpp"

namespace debnn {

/// Hyperparameter chosen for a posterior and its validation score.
struct TuningRecord {
  std::string parameter;  // "prior_precision", "lr", ...
  double value = 0.0;
  double val_elpd = 0.0;
  TuningTable table;
};

/// A fitted posterior together with where it came from.
struct PosteriorHandle {
  NetworkSpec spec;
  Posterior posterior;
  std::string provenance;  // id of the MAP checkpoint it was built from
  std::string method;      // de, swa, swag, llla, lanf-T, ...
  std::optional<TuningRecord> tuning;
};

/// q(theta) = sum_k pi_k q_k(theta). Components are immutable and may be
/// shared between mixtures.
struct MixturePosterior {
  NetworkSpec spec;
  std::vector<std::shared_ptr<const PosteriorHandle>> components;
  std::vector<double> weights;

  int size() const { return static_cast<int>(components.size()); }
};

/// Uniform weights unless `weights` is given. Throws on an empty list,
/// components with different specs, or weights off the simplex.
MixturePosterior build_mixture(std::vector<std::shared_ptr<const PosteriorHandle>> handles,
                               std::optional<std::vector<double>> weights = std::nullopt);
MixturePosterior build_mixture(std::vector<PosteriorHandle> handles,
                               std::optional<std::vector<double>> weights = std::nullopt);

/// Parameter samples grouped by component. `weights[s]` is the weight of
/// sample s in the predictive average and sums to one.
struct SampleBatch {
  std::vector<ParamVector> samples;
  std::vector<int> component;
  std::vector<double> weights;

  int size() const { return static_cast<int>(samples.size()); }
};

/// floor(S pi_k) per component; the remaining samples go to the largest
/// fractional parts, ties to the lower index.
std::vector<int> stratified_allocation(const std::vector<double>& weights, int samples);

/// Every component k draws from its own stream derive_seed(seed, "component",
/// {k}), so stratified and iid batches built from the same seed use identical
/// per-component sample sequences and differ only in the allocation.
SampleBatch stratified_sample(const MixturePosterior& mix, int samples, std::uint64_t seed);

/// Component counts from S independent categorical draws (selector stream
/// derive_seed(seed, "selector")), then per-component sampling as above.
/// Samples are weighted 1/S.
SampleBatch iid_sample(const MixturePosterior& mix, int samples, std::uint64_t seed);

struct EnsembleDraw {
  std::vector<int> members;  // distinct ids in [0, pool_size)
  std::uint64_t seed = 0;
  int size() const { return static_cast<int>(members.size()); }
};

/// `n_draws` independent uniform K-subsets of the pool.
std::vector<EnsembleDraw> draw_ensembles(int pool_size, int k, int n_draws, std::uint64_t seed);

struct StackingResult {
  std::vector<double> weights;
  std::vector<double> objective_trace;  // mean log score, starting at uniform weights
  int iterations = 0;
  bool converged = false;
};

/// Maximizes mean_n log sum_k pi_k exp(l_nk) over the simplex by
/// exponentiated-gradient ascent from uniform weights. A step that would
/// lower the objective is retried with half the step size, so the trace is
/// non-decreasing.
StackingResult stack_weights(const Eigen::MatrixXd& member_log_densities, int max_iters = 10000,
                             double tol = 1e-9);

/// H(pi) / log K with 0 log 0 = 0.
double normalized_entropy(const std::vector<double>& weights);

/// Membership record of one evaluated ensemble.
struct EnsembleManifest {
  std::vector<std::string> members;  // posterior file ids
  std::vector<double> weights;
  std::uint64_t seed = 0;
  int k = 0;
  bool operator==(const EnsembleManifest&) const = default;
};

}  // namespace debnn
