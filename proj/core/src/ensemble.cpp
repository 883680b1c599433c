#include "debnn/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace debnn {

namespace {

void check_simplex(const std::vector<double>& w) {
  if (w.empty()) throw std::invalid_argument("weights are empty");
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("weight outside [0, 1]");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("weights do not sum to one");
}

// Draws counts[k] samples from component k, in component order.
SampleBatch sample_counts(const MixturePosterior& mix, const std::vector<int>& counts,
                          std::uint64_t seed) {
  SampleBatch batch;
  const int total = std::accumulate(counts.begin(), counts.end(), 0);
  batch.samples.reserve(static_cast<std::size_t>(total));
  for (int k = 0; k < mix.size(); ++k) {
    const int n = counts[static_cast<std::size_t>(k)];
    if (n == 0) continue;
    Rng rng(derive_seed(seed, "component", {static_cast<std::uint64_t>(k)}));
    for (int j = 0; j < n; ++j) {
      batch.samples.push_back(sample(mix.components[static_cast<std::size_t>(k)]->posterior, rng));
      batch.component.push_back(k);
    }
  }
  return batch;
}

}  // namespace

MixturePosterior build_mixture(std::vector<std::shared_ptr<const PosteriorHandle>> handles,
                               std::optional<std::vector<double>> weights) {
  if (handles.empty()) throw std::invalid_argument("mixture needs at least one component");
  for (const auto& h : handles) {
    if (!h) throw std::invalid_argument("mixture component is null");
  }
  const NetworkSpec spec = handles.front()->spec;
  for (const auto& h : handles) {
    if (!(h->spec == spec)) throw std::invalid_argument("mixture components have different specs");
  }
  const std::size_t k = handles.size();
  std::vector<double> w = weights ? *weights : std::vector<double>(k, 1.0 / static_cast<double>(k));
  if (w.size() != k) throw std::invalid_argument("one weight per component required");
  check_simplex(w);
  return MixturePosterior{spec, std::move(handles), std::move(w)};
}

MixturePosterior build_mixture(std::vector<PosteriorHandle> handles,
                               std::optional<std::vector<double>> weights) {
  std::vector<std::shared_ptr<const PosteriorHandle>> shared;
  shared.reserve(handles.size());
  for (auto& h : handles) shared.push_back(std::make_shared<const PosteriorHandle>(std::move(h)));
  return build_mixture(std::move(shared), std::move(weights));
}

std::vector<int> stratified_allocation(const std::vector<double>& weights, int samples) {
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  const std::size_t k = weights.size();
  std::vector<int> counts(k);
  std::vector<double> frac(k);
  int assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = weights[i] * samples;
    // Guard products such as 0.7 * 10 = 7.000000000000001.
    double whole = std::floor(exact + 1e-9);
    counts[i] = static_cast<int>(whole);
    frac[i] = std::max(0.0, exact - whole);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < samples; i = (i + 1) % k) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

SampleBatch stratified_sample(const MixturePosterior& mix, int samples, std::uint64_t seed) {
  const std::vector<int> counts = stratified_allocation(mix.weights, samples);
  SampleBatch batch = sample_counts(mix, counts, seed);
  // Stratum k gets total weight pi_k, spread over its n_k samples; strata
  // left empty (S < K) have their mass shared by the others.
  double mass = 0.0;
  for (int k = 0; k < mix.size(); ++k) {
    if (counts[static_cast<std::size_t>(k)] > 0) mass += mix.weights[static_cast<std::size_t>(k)];
  }
  batch.weights.reserve(batch.samples.size());
  for (int k : batch.component) {
    batch.weights.push_back(mix.weights[static_cast<std::size_t>(k)] /
                            (mass * counts[static_cast<std::size_t>(k)]));
  }
  return batch;
}

SampleBatch iid_sample(const MixturePosterior& mix, int samples, std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  Rng selector(derive_seed(seed, "selector"));
  std::vector<int> counts(mix.weights.size(), 0);
  for (int s = 0; s < samples; ++s) {
    const double u = selector.uniform();
    double acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < mix.weights.size(); ++k) {
      acc += mix.weights[k];
      if (u < acc) break;
    }
    ++counts[k];
  }
  SampleBatch batch = sample_counts(mix, counts, seed);
  batch.weights.assign(batch.samples.size(), 1.0 / samples);
  return batch;
}

std::vector<EnsembleDraw> draw_ensembles(int pool_size, int k, int n_draws, std::uint64_t seed) {
  if (k < 1 || pool_size < 1) throw std::invalid_argument("pool and ensemble sizes must be positive");
  if (k > pool_size) throw std::invalid_argument("ensemble size exceeds the pool size");
  if (n_draws < 0) throw std::invalid_argument("number of draws must be >= 0");
  std::vector<EnsembleDraw> draws;
  draws.reserve(static_cast<std::size_t>(n_draws));
  for (int d = 0; d < n_draws; ++d) {
    const std::uint64_t s = derive_seed(seed, "draw", {static_cast<std::uint64_t>(d)});
    Rng rng(s);
    std::vector<int> ids(static_cast<std::size_t>(pool_size));
    std::iota(ids.begin(), ids.end(), 0);
    // Partial Fisher-Yates: the first k positions form a uniform k-subset.
    for (int i = 0; i < k; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(pool_size - i));
      std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
    }
    ids.resize(static_cast<std::size_t>(k));
    draws.push_back(EnsembleDraw{std::move(ids), s});
  }
  return draws;
}

StackingResult stack_weights(const Eigen::MatrixXd& l, int max_iters, double tol) {
  const Eigen::Index n = l.rows();
  const Eigen::Index k = l.cols();
  if (k < 2) throw std::invalid_argument("stacking needs at least two members");
  if (n < 1) throw std::invalid_argument("stacking needs at least one row");
  if (!l.allFinite()) throw std::invalid_argument("member log densities must be finite");

  const Eigen::VectorXd row_max = l.rowwise().maxCoeff();
  const Eigen::MatrixXd dens = (l.colwise() - row_max).array().exp().matrix();

  const auto objective = [&](const Eigen::VectorXd& w) {
    return ((dens * w).array().log().matrix() + row_max).mean();
  };

  Eigen::VectorXd w = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  StackingResult result;
  double current = objective(w);
  result.objective_trace.push_back(current);
  double eta = 1.0;
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::VectorXd mix = dens * w;
    const Eigen::VectorXd grad = (dens.array().colwise() / mix.array()).colwise().mean().transpose();
    Eigen::VectorXd next;
    double value = current;
    bool improved = false;
    for (int tries = 0; tries < 60; ++tries) {
      const Eigen::ArrayXd logits = w.array().log() + eta * grad.array();
      next = (logits - logits.maxCoeff()).exp().matrix();
      next /= next.sum();
      value = objective(next);
      if (value >= current) {
        improved = true;
        break;
      }
      eta *= 0.5;
    }
    result.iterations = it + 1;
    if (!improved) {
      result.converged = true;
      break;
    }
    w = next;
    const double change = value - current;
    current = value;
    result.objective_trace.push_back(current);
    if (change < tol) {
      result.converged = true;
      break;
    }
  }
  result.weights.assign(w.data(), w.data() + w.size());
  return result;
}

double normalized_entropy(const std::vector<double>& weights) {
  if (weights.size() < 2) throw std::invalid_argument("normalized entropy needs K >= 2");
  double h = 0.0;
  for (double p : weights) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h / std::log(static_cast<double>(weights.size()));
}

}  // namespace debnn
