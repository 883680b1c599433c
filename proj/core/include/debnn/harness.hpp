#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "debnn/data.hpp"
#include "debnn/ensemble.hpp"
#include "debnn/io.hpp"
#include "debnn/metrics.hpp"
#include "debnn/nn.hpp"
#include "debnn/posteriors.hpp"

namespace debnn {

/// Desk-scale MAP training for a dataset kind. Classifiers train long with
/// little weight decay and no early stopping, which leaves the MAPs
/// overconfident and the pool diverse; the regressor early-stops at a lower
/// learning rate because the variance head diverges at 0.05.
TrainConfig default_training(const std::string& kind);

struct DataConfig {
  std::string kind = "two_moons";  // two_moons | spirals | regression
  std::size_t n = 400;
  double noise = 0.3;  // ignored by the regression generator
  int num_classes = 2;
  std::uint64_t seed = 0;
  std::string ood = "";  // empty: shifted_blobs for classification, out_of_range for regression
};

struct ExperimentConfig {
  std::string name = "two_moons";
  DataConfig data;
  std::vector<int> hidden = {64, 64};
  Activation activation = Activation::tanh;
  TrainConfig train;  // default_training(data.kind)

  int pool_size = 30;
  std::vector<int> ks = {1, 2, 5, 10, 20};
  int n_draws = 30;
  int s_select = 100;
  int s_test = 200;
  std::vector<std::string> methods = {"de", "swa", "swag", "llla", "lanf-10"};
  std::vector<int> flow_lengths = {1, 5, 10, 30};

  std::vector<double> prior_precision_grid = default_prior_precision_grid();
  std::vector<double> swag_lr_grid = default_swag_lr_grid();
  std::vector<double> flow_prior_grid = default_flow_prior_grid();
  int swag_epochs = 20;  // M
  int swag_rank = 20;    // R
  int flow_epochs = 20;
  double flow_lr = 1e-3;
  int flow_mc_samples = 8;

  std::vector<int> ablate_samples = {1, 2, 5, 10, 20, 50, 100, 200, 500};
  int ablate_k = 20;
  std::vector<double> lambdas = log_spaced(1e-3, 1.0, 9);
  std::vector<std::string> lambda_methods = {"swag", "llla"};
  int ece_bins = 15;

  std::uint64_t seed = 0;
  int workers = 1;
  std::filesystem::path work_dir = "work";

  ExperimentConfig();

  void validate() const;
  bool classification() const { return data.kind != "regression"; }
  NetworkSpec network() const;
  /// Every method with a posterior file per member, including all flow
  /// lengths and, for classifiers, the probit-selected LLLA.
  std::vector<std::string> fitted_methods() const;
};

/// Defaults for `kind`; only the dataset kind and the training settings
/// differ between tasks.
ExperimentConfig default_config(const std::string& kind);

/// Canonical JSON text of the configuration (stable key order).
std::string config_to_json(const ExperimentConfig& c);
/// Missing keys take the defaults of the dataset kind in the text.
ExperimentConfig config_from_json(const std::string& text);

// --- task graph -----------------------------------------------------------

/// A unit of work. The cache key hashes `params` and the bytes of every
/// input file (missing files hash as absent); when all outputs exist and the
/// key stored next to the first output matches, the task is skipped.
struct Task {
  std::string id;
  std::vector<std::string> deps;
  std::string params;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  std::function<void()> run;
};

struct RunSummary {
  int ran = 0;
  int cached = 0;
  std::vector<std::pair<std::string, std::string>> failed;  // task id, message
};

std::string cache_key(const std::string& params, const std::vector<std::filesystem::path>& inputs);

class RunPlan {
 public:
  void add(Task task);
  const std::vector<Task>& tasks() const { return tasks_; }

  /// Throws std::invalid_argument on unknown dependencies or cycles and
  /// returns the ids in a topological order (insertion order among ready
  /// tasks).
  std::vector<std::string> topological_order() const;

  /// Runs with at most `workers` tasks in flight. Dependencies only order
  /// execution: a task whose upstream failed still runs and is expected to
  /// cope with missing inputs. Failures are collected, never rethrown.
  RunSummary execute(int workers) const;

 private:
  std::vector<Task> tasks_;
};

// --- pipeline -------------------------------------------------------------

/// Locations of every artifact under the work directory.
struct WorkLayout {
  std::filesystem::path root;

  std::filesystem::path dataset() const { return root / "data" / "dataset.cbor"; }
  std::filesystem::path ood() const { return root / "data" / "ood.cbor"; }
  std::filesystem::path checkpoint(int member) const;
  std::filesystem::path failure(int member) const;
  std::filesystem::path posterior(const std::string& method, int member) const;
  std::filesystem::path store(const std::string& experiment) const;
  std::filesystem::path table(const std::string& name) const;
  std::filesystem::path reports() const { return root / "reports"; }
};

std::string member_id(int member);

/// Seed used for all predictive sampling of (method, K, draw).
std::uint64_t sampling_seed(std::uint64_t master, const std::string& method, int k, int draw);

/// The ensemble draws for one K, shared by every method.
std::vector<EnsembleDraw> ensemble_draws(const ExperimentConfig& c, int k);

enum class Command {
  data,
  train_pool,
  fit_posteriors,
  evaluate,
  ablate_samples,
  sweep_lambda,
  ood,
  stacking,
  rank,
  report,
};

std::string to_string(Command c);
Command command_from_string(const std::string& s);

/// Adds the tasks of `command` (and, when `with_upstream`, of everything it
/// depends on) to `plan`.
void plan_command(const ExperimentConfig& c, Command command, bool with_upstream, RunPlan& plan);

/// Plans and executes one command. Upstream stages are included so a
/// command can be run on a fresh work directory; cached stages cost only a
/// key check.
RunSummary run_command(const ExperimentConfig& c, Command command);

/// Every stage in order.
RunSummary run_pipeline(const ExperimentConfig& c);

// --- derived tables -------------------------------------------------------

struct DeltaRow {
  std::string method;
  int k = 0;
  double mean = 0.0;    // percent
  double two_se = 0.0;  // percent
  int n_draws = 0;
};

/// Percentage ELPD change of every evaluate row relative to the mean DE K=1
/// ELPD. The mean is taken before the percentage, so DE at K=1 is exactly 0.
std::vector<DeltaRow> delta_vs_map(const std::vector<MetricsReport>& rows);
/// Per-draw percentage change relative to the DE ensemble on the same draw.
std::vector<DeltaRow> delta_vs_de(const std::vector<MetricsReport>& rows);

struct RankRow {
  std::string method;
  int k = 0;
  std::string metric;
  double mean_rank = 0.0;
  int n_draws = 0;
};

/// Average ranks (1 = best, ties share the average rank) of `methods` per
/// (draw, K, metric). Draws missing any method are excluded and counted in
/// `skipped`.
std::vector<RankRow> rank_methods(const std::vector<MetricsReport>& rows,
                                  const std::vector<std::string>& methods, int* skipped = nullptr);

/// Ranks of `values` (higher is better unless `lower_is_better`), ties
/// receiving the average of the ranks they span.
std::vector<double> average_ranks(const std::vector<double>& values, bool lower_is_better);

/// mean and standard error of the mean.
std::pair<double, double> mean_and_se(const std::vector<double>& v);

}  // namespace debnn
