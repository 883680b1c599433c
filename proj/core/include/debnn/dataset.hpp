#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace debnn {

enum class TaskKind { classification, regression };

/// Inputs and targets for a set of rows. Class targets are stored as exact
/// small integers in a double vector.
struct Batch {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;

  Eigen::Index size() const { return x.rows(); }
};

struct Splits {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> val;
  std::vector<Eigen::Index> test;
};

struct GeneratorSpec {
  std::string name;  // two_moons | spirals | sine_hetero
  std::size_t n = 0;
  double noise = 0.0;
  std::uint64_t seed = 0;
  int num_classes = 0;
};

struct Dataset {
  Eigen::MatrixXd inputs;
  Eigen::VectorXd targets;
  TaskKind task = TaskKind::classification;
  int num_classes = 0;  // 0 for regression
  Splits splits;
  GeneratorSpec generator;

  Batch rows(std::span<const Eigen::Index> idx) const;
  Batch train() const { return rows(splits.train); }
  Batch val() const { return rows(splits.val); }
  Batch test() const { return rows(splits.test); }

  /// Throws std::invalid_argument when splits overlap, miss rows, or targets
  /// are out of range.
  void validate() const;
};

}  // namespace debnn
