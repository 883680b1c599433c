#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "debnn/rng.hpp"

namespace debnn {

/// Radial transform f(z) = z + beta * (z - z0) / (alpha + |z - z0|).
///
/// alpha = exp(log_alpha) and beta = -alpha + softplus(beta_raw), which keeps
/// beta >= -alpha and therefore f invertible for every parameter value.
struct RadialFlow {
  Eigen::VectorXd z0;
  double log_alpha = 0.0;
  double beta_raw = 0.0;

  double alpha() const;
  double beta() const;

  /// Parameters with beta = 0 exactly (identity map) centred at `z0`.
  static RadialFlow identity(Eigen::VectorXd z0, double log_alpha = 0.0);
};

struct FlowOutput {
  Eigen::VectorXd value;
  double log_det = 0.0;
};

/// Applies the flows in order, accumulating log|det J|.
FlowOutput flow_forward(std::span<const RadialFlow> flows, const Eigen::VectorXd& z);

/// Same as flow_forward, but also records the input of every flow
/// (trajectory[t] is the input of flow t) for flow_backward.
FlowOutput flow_forward(std::span<const RadialFlow> flows, const Eigen::VectorXd& z,
                        std::vector<Eigen::VectorXd>& trajectory);

/// Inverse of the flow chain. Each radial map is inverted in closed form by
/// solving a quadratic for the pre-image radius.
Eigen::VectorXd flow_inverse(std::span<const RadialFlow> flows, const Eigen::VectorXd& y);

struct RadialFlowGrad {
  Eigen::VectorXd z0;
  double log_alpha = 0.0;
  double beta_raw = 0.0;
};

/// Reverse pass of L = <g_value, F(z)> + g_log_det * log|det J_F(z)|.
/// Accumulates parameter gradients into `grads` (resized on demand) and
/// returns dL/dz.
Eigen::VectorXd flow_backward(std::span<const RadialFlow> flows,
                              const std::vector<Eigen::VectorXd>& trajectory,
                              const Eigen::VectorXd& g_value, double g_log_det,
                              std::vector<RadialFlowGrad>& grads);

}  // namespace debnn
