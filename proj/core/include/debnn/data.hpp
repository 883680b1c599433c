#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include <Eigen/Core>

#include "debnn/dataset.hpp"

namespace debnn {

enum class ClassificationKind { two_moons, spirals };

/// Two-moons (two classes) or a C-arm spiral with isotropic Gaussian input
/// noise. Rows are split 70/10/20 into train/val/test by a seeded
/// permutation.
Dataset make_classification(ClassificationKind kind, std::size_t n, double noise,
                            std::uint64_t seed, int num_classes = 2);

struct RegressionOptions {
  /// Noise standard deviation as a function of x.
  std::function<double(double)> noise_std = [](double x) { return 0.05 + 0.2 * std::abs(x); };
  /// Multiplies the standard normal noise; 0 puts targets on the clean curve.
  double epsilon_scale = 1.0;
};

double regression_mean(double x);

/// y = sin(3x) + 0.5x + sigma(x) * eps with x ~ U[-2, 2].
Dataset make_regression(std::size_t n, std::uint64_t seed, const RegressionOptions& options = {});

enum class OodKind { shifted_blobs, scaled, out_of_range };

struct OodPair {
  std::string id_name;  // generator name of the in-distribution set
  Eigen::MatrixXd inputs;
  OodKind kind = OodKind::shifted_blobs;
  std::uint64_t seed = 0;
};

/// Out-of-distribution inputs matched to `id`, as many rows as its test split.
OodPair make_ood(const Dataset& id, OodKind kind, std::uint64_t seed);

/// 70/10/20 train/val/test split of n rows from a seeded permutation.
Splits split_indices(std::size_t n, std::uint64_t seed);

std::string to_string(OodKind k);
OodKind ood_kind_from_string(const std::string& s);

}  // namespace debnn
