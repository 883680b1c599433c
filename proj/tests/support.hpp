#pragma once

#include <cmath>
#include <functional>

#include <Eigen/Core>

#include "debnn/dataset.hpp"
#include "debnn/nn.hpp"
#include "debnn/rng.hpp"

namespace debnn::testing {

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

inline Batch random_batch(const NetworkSpec& spec, Eigen::Index n, Rng& rng) {
  Batch b{random_matrix(n, spec.input_width(), rng), Eigen::VectorXd(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    b.y[i] = spec.head == HeadKind::classifier
                 ? static_cast<double>(rng.below(static_cast<std::uint64_t>(spec.num_classes)))
                 : rng.normal();
  }
  return b;
}

inline ParamVector random_params(const NetworkSpec& spec, Rng& rng, double scale = 0.7) {
  ParamVector p = init_params(spec, rng.next_u64());
  for (Eigen::Index i = 0; i < p.size(); ++i) p.values[i] = scale * rng.normal();
  return p;
}

/// Central finite-difference gradient.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        const Eigen::VectorXd& x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / denom;
}

}  // namespace debnn::testing
