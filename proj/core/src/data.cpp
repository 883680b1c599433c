#include "debnn/data.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "debnn/rng.hpp"

namespace debnn {

Batch Dataset::rows(std::span<const Eigen::Index> idx) const {
  Batch b{Eigen::MatrixXd(static_cast<Eigen::Index>(idx.size()), inputs.cols()),
          Eigen::VectorXd(static_cast<Eigen::Index>(idx.size()))};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    b.x.row(r) = inputs.row(idx[i]);
    b.y[r] = targets[idx[i]];
  }
  return b;
}

void Dataset::validate() const {
  const Eigen::Index n = inputs.rows();
  if (targets.size() != n) throw std::invalid_argument("dataset targets and inputs disagree");
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  for (const auto* part : {&splits.train, &splits.val, &splits.test}) {
    for (Eigen::Index i : *part) {
      if (i < 0 || i >= n) throw std::invalid_argument("split index out of range");
      if (seen[static_cast<std::size_t>(i)]++) throw std::invalid_argument("splits overlap");
    }
  }
  for (int s : seen) {
    if (s != 1) throw std::invalid_argument("splits do not cover every row");
  }
  if (task == TaskKind::classification) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y = targets[i];
      if (y < 0 || y >= num_classes || std::floor(y) != y) {
        throw std::invalid_argument("class target out of range");
      }
    }
  }
}

Splits split_indices(std::size_t n, std::uint64_t seed) {
  std::vector<Eigen::Index> perm(n);
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(perm);
  const std::size_t n_train = 7 * n / 10;
  const std::size_t n_val = n / 10;
  Splits s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return s;
}

Dataset make_classification(ClassificationKind kind, std::size_t n, double noise,
                            std::uint64_t seed, int num_classes) {
  if (n < 30) throw std::invalid_argument("classification datasets need n >= 30");
  if (!(noise >= 0.0)) throw std::invalid_argument("noise must be nonnegative");
  if (kind == ClassificationKind::two_moons) num_classes = 2;
  if (num_classes < 2) throw std::invalid_argument("need at least two classes");

  Dataset d;
  d.task = TaskKind::classification;
  d.num_classes = num_classes;
  d.inputs.resize(static_cast<Eigen::Index>(n), 2);
  d.targets.resize(static_cast<Eigen::Index>(n));
  Rng rng(derive_seed(seed, "inputs"));

  Eigen::Index row = 0;
  const auto per_class = [&](int c) {
    return n / static_cast<std::size_t>(num_classes) +
           (static_cast<std::size_t>(c) < n % static_cast<std::size_t>(num_classes) ? 1 : 0);
  };
  for (int c = 0; c < num_classes; ++c) {
    const std::size_t m = per_class(c);
    for (std::size_t i = 0; i < m; ++i, ++row) {
      const double t = m > 1 ? static_cast<double>(i) / static_cast<double>(m - 1) : 0.0;
      double x0 = 0.0;
      double x1 = 0.0;
      if (kind == ClassificationKind::two_moons) {
        const double a = std::numbers::pi * t;
        if (c == 0) {
          x0 = std::cos(a);
          x1 = std::sin(a);
        } else {
          x0 = 1.0 - std::cos(a);
          x1 = 0.5 - std::sin(a);
        }
      } else {
        const double radius = 0.2 + 1.8 * t;
        const double a = 2.0 * std::numbers::pi * c / num_classes + 1.25 * std::numbers::pi * t;
        x0 = radius * std::cos(a);
        x1 = radius * std::sin(a);
      }
      if (noise > 0.0) {
        x0 += noise * rng.normal();
        x1 += noise * rng.normal();
      }
      d.inputs(row, 0) = x0;
      d.inputs(row, 1) = x1;
      d.targets[row] = c;
    }
  }
  d.splits = split_indices(n, seed);
  d.generator = {kind == ClassificationKind::two_moons ? "two_moons" : "spirals", n, noise, seed,
                 num_classes};
  d.validate();
  return d;
}

double regression_mean(double x) { return std::sin(3.0 * x) + 0.5 * x; }

Dataset make_regression(std::size_t n, std::uint64_t seed, const RegressionOptions& options) {
  if (n < 30) throw std::invalid_argument("regression datasets need n >= 30");
  Dataset d;
  d.task = TaskKind::regression;
  d.num_classes = 0;
  d.inputs.resize(static_cast<Eigen::Index>(n), 1);
  d.targets.resize(static_cast<Eigen::Index>(n));
  Rng rng(derive_seed(seed, "inputs"));
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    const double x = -2.0 + 4.0 * rng.uniform();
    const double eps = rng.normal();
    d.inputs(i, 0) = x;
    d.targets[i] = regression_mean(x) + options.epsilon_scale * options.noise_std(x) * eps;
  }
  d.splits = split_indices(n, seed);
  d.generator = {"sine_hetero", n, options.epsilon_scale, seed, 0};
  d.validate();
  return d;
}

OodPair make_ood(const Dataset& id, OodKind kind, std::uint64_t seed) {
  const bool classification = id.task == TaskKind::classification;
  if (classification == (kind == OodKind::out_of_range)) {
    throw std::invalid_argument("OOD kind " + to_string(kind) + " is incompatible with the task");
  }
  const auto m = static_cast<Eigen::Index>(id.splits.test.size());
  const Eigen::Index d = id.inputs.cols();
  OodPair ood{id.generator.name, Eigen::MatrixXd(m, d), kind, seed};
  Rng rng(derive_seed(seed, "ood"));

  switch (kind) {
    case OodKind::scaled:
      for (Eigen::Index i = 0; i < m; ++i) ood.inputs.row(i) = 3.0 * id.inputs.row(id.splits.test[i]);
      break;
    case OodKind::out_of_range:
      for (Eigen::Index i = 0; i < m; ++i) {
        const double magnitude = 2.0 + 2.0 * (1.0 - rng.uniform());  // (2, 4]
        ood.inputs(i, 0) = rng.uniform() < 0.5 ? -magnitude : magnitude;
        for (Eigen::Index j = 1; j < d; ++j) ood.inputs(i, j) = 0.0;
      }
      break;
    case OodKind::shifted_blobs: {
      // Blob centres sit 3 units beyond the ball enclosing the ID bounding
      // box; samples are truncated to radius 0.5, so every OOD point is more
      // than 2 units from the ID hull.
      const Eigen::RowVectorXd lo = id.inputs.colwise().minCoeff();
      const Eigen::RowVectorXd hi = id.inputs.colwise().maxCoeff();
      const Eigen::RowVectorXd centre = 0.5 * (lo + hi);
      const double half_diag = 0.5 * (hi - lo).norm();
      const Eigen::Index n_blobs = 2 * d;
      for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index blob = i % n_blobs;
        Eigen::RowVectorXd c = centre;
        c[blob / 2] += (blob % 2 == 0 ? 1.0 : -1.0) * (half_diag + 3.0);
        Eigen::RowVectorXd offset(d);
        do {
          for (Eigen::Index j = 0; j < d; ++j) offset[j] = 0.25 * rng.normal();
        } while (offset.norm() > 0.5);
        ood.inputs.row(i) = c + offset;
      }
      break;
    }
  }
  return ood;
}

std::string to_string(OodKind k) {
  switch (k) {
    case OodKind::shifted_blobs: return "shifted_blobs";
    case OodKind::scaled: return "scaled";
    case OodKind::out_of_range: return "out_of_range";
  }
  return "?";
}

OodKind ood_kind_from_string(const std::string& s) {
  if (s == "shifted_blobs") return OodKind::shifted_blobs;
  if (s == "scaled") return OodKind::scaled;
  if (s == "out_of_range") return OodKind::out_of_range;
  throw std::invalid_argument("unknown OOD kind '" + s + "'");
}

}  // namespace debnn
