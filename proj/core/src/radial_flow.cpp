#include "debnn/radial_flow.hpp"

#include <cmath>
#include <stdexcept>

#include "debnn/nn.hpp"

namespace debnn {

double RadialFlow::alpha() const { return std::exp(log_alpha); }

double RadialFlow::beta() const { return -alpha() + softplus(beta_raw); }

RadialFlow RadialFlow::identity(Eigen::VectorXd z0, double log_alpha) {
  const double a = std::exp(log_alpha);
  return RadialFlow{std::move(z0), log_alpha, std::log(std::expm1(a))};
}

namespace {

struct Local {
  Eigen::VectorXd d;
  double r;
  double h;
  double u;
  double alpha;
  double beta;
};

Local local_terms(const RadialFlow& f, const Eigen::VectorXd& z) {
  if (z.size() != f.z0.size()) throw std::invalid_argument("flow dimension mismatch");
  Local l;
  l.d = z - f.z0;
  l.r = l.d.norm();
  l.alpha = f.alpha();
  l.beta = f.beta();
  l.h = 1.0 / (l.alpha + l.r);
  l.u = l.beta * l.h;
  return l;
}

}  // namespace

FlowOutput flow_forward(std::span<const RadialFlow> flows, const Eigen::VectorXd& z,
                        std::vector<Eigen::VectorXd>& trajectory) {
  trajectory.clear();
  trajectory.reserve(flows.size());
  FlowOutput out{z, 0.0};
  const double dim = static_cast<double>(z.size());
  for (const RadialFlow& f : flows) {
    trajectory.push_back(out.value);
    const Local l = local_terms(f, out.value);
    // 1 + beta h + beta h' r simplifies to 1 + beta alpha h^2.
    out.log_det += (dim - 1.0) * std::log1p(l.u) + std::log1p(l.beta * l.alpha * l.h * l.h);
    out.value += l.u * l.d;
  }
  return out;
}

FlowOutput flow_forward(std::span<const RadialFlow> flows, const Eigen::VectorXd& z) {
  std::vector<Eigen::VectorXd> trajectory;
  return flow_forward(flows, z, trajectory);
}

Eigen::VectorXd flow_inverse(std::span<const RadialFlow> flows, const Eigen::VectorXd& y) {
  Eigen::VectorXd z = y;
  for (std::size_t t = flows.size(); t-- > 0;) {
    const RadialFlow& f = flows[t];
    const Eigen::VectorXd dy = z - f.z0;
    const double ry = dy.norm();
    if (ry == 0.0) {
      z = f.z0;
      continue;
    }
    const double a = f.alpha();
    const double b = f.beta();
    // r (alpha + r) + beta r = ry (alpha + r), positive root.
    const double p = a + b - ry;
    const double r = 0.5 * (-p + std::sqrt(p * p + 4.0 * ry * a));
    z = f.z0 + dy / (1.0 + b / (a + r));
  }
  return z;
}

Eigen::VectorXd flow_backward(std::span<const RadialFlow> flows,
                              const std::vector<Eigen::VectorXd>& trajectory,
                              const Eigen::VectorXd& g_value, double g_log_det,
                              std::vector<RadialFlowGrad>& grads) {
  if (trajectory.size() != flows.size()) throw std::invalid_argument("trajectory length mismatch");
  if (grads.size() != flows.size()) {
    grads.assign(flows.size(), RadialFlowGrad{});
  }
  Eigen::VectorXd g = g_value;
  for (std::size_t t = flows.size(); t-- > 0;) {
    const RadialFlow& f = flows[t];
    const Local l = local_terms(f, trajectory[t]);
    const double dim = static_cast<double>(l.d.size());
    const double a = l.alpha;
    const double b = l.beta;
    const double h = l.h;
    const double h2 = h * h;
    const double one_u = 1.0 + l.u;
    const double second = 1.0 + b * a * h2;
    const double gd = g.dot(l.d);

    const double dld_dr = (dim - 1.0) * (-b * h2) / one_u + (-2.0 * b * a * h2 * h) / second;
    const double dld_da = (dim - 1.0) * (-b * h2) / one_u + (b * h2 - 2.0 * b * a * h2 * h) / second;
    const double dld_db = (dim - 1.0) * h / one_u + a * h2 / second;

    const double g_r = gd * (-b * h2) + g_log_det * dld_dr;
    const double g_alpha = gd * (-b * h2) + g_log_det * dld_da;
    const double g_beta = gd * h + g_log_det * dld_db;

    Eigen::VectorXd gz = one_u * g;
    if (l.r > 0.0) gz += (g_r / l.r) * l.d;

    RadialFlowGrad& acc = grads[t];
    if (acc.z0.size() != l.d.size()) acc.z0 = Eigen::VectorXd::Zero(l.d.size());
    acc.z0 += g - gz;
    acc.log_alpha += a * (g_alpha - g_beta);
    acc.beta_raw += g_beta * sigmoid(f.beta_raw);
    g = std::move(gz);
  }
  return g;
}

}  // namespace debnn
