#include "debnn/posteriors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace debnn {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Position of (output c, feature j) inside the last-layer block; j == in is
// the bias.
Eigen::Index head_index(int c, int j, int in, int out) {
  return j < in ? static_cast<Eigen::Index>(c) * in + j
                : static_cast<Eigen::Index>(out) * in + c;
}

Eigen::MatrixXd with_bias_column(const Eigen::MatrixXd& phi) {
  Eigen::MatrixXd out(phi.rows(), phi.cols() + 1);
  out.leftCols(phi.cols()) = phi;
  out.col(phi.cols()).setOnes();
  return out;
}

// Log-likelihood of every row under the last-layer parameters `head`, and
// optionally the gradient of the summed log-likelihood of `rows`.
double head_log_likelihood(const NetworkSpec& spec, const Eigen::MatrixXd& phi,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& head,
                           std::span<const Eigen::Index> rows, Eigen::VectorXd* grad) {
  const int in = spec.penultimate_width();
  const int out = spec.output_width();
  Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), phi.cols());
  Eigen::VectorXd ys(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    sub.row(static_cast<Eigen::Index>(i)) = phi.row(rows[i]);
    ys[static_cast<Eigen::Index>(i)] = y[rows[i]];
  }
  const Eigen::MatrixXd outputs = head_outputs(spec, head, sub);
  const double total = log_likelihood(spec, outputs, ys).sum();
  if (grad != nullptr) {
    // d log p / d outputs, then pull back through the affine map.
    Eigen::MatrixXd g(outputs.rows(), out);
    for (Eigen::Index n = 0; n < outputs.rows(); ++n) {
      if (spec.head == HeadKind::classifier) {
        const Eigen::RowVectorXd o = outputs.row(n);
        const double m = o.maxCoeff();
        Eigen::RowVectorXd p = (o.array() - m).exp();
        p /= p.sum();
        g.row(n) = -p;
        g(n, static_cast<Eigen::Index>(ys[n])) += 1.0;
      } else {
        const double v = variance_from_raw(outputs(n, 1));
        const double e = ys[n] - outputs(n, 0);
        g(n, 0) = e / v;
        g(n, 1) = -sigmoid(outputs(n, 1)) * (0.5 / v - 0.5 * e * e / (v * v));
      }
    }
    grad->setZero(head.size());
    const Eigen::MatrixXd gw = g.transpose() * sub;  // out x in
    for (int c = 0; c < out; ++c) {
      for (int j = 0; j < in; ++j) (*grad)[head_index(c, j, in, out)] = gw(c, j);
      (*grad)[head_index(c, in, in, out)] = g.col(c).sum();
    }
  }
  return total;
}

// ELPD of the rows of `phi` under a set of sampled last layers.
double heads_elpd(const NetworkSpec& spec, const Eigen::MatrixXd& phi, const Eigen::VectorXd& y,
                  const std::vector<Eigen::VectorXd>& heads) {
  Eigen::MatrixXd ll(phi.rows(), static_cast<Eigen::Index>(heads.size()));
  for (std::size_t s = 0; s < heads.size(); ++s) {
    ll.col(static_cast<Eigen::Index>(s)) = log_likelihood(spec, head_outputs(spec, heads[s], phi), y);
  }
  return mc_elpd(ll);
}

}  // namespace

// --- SWAG -----------------------------------------------------------------

ParamVector SwagPosterior::sample(Rng& rng) const {
  ParamVector out = theta_swa;
  const Eigen::Index p = theta_swa.size();
  const Eigen::VectorXd z1 = rng.normal_vector(p);
  const Eigen::VectorXd z2 = rng.normal_vector(deviations.cols());
  out.values += std::sqrt(0.5 * scale) * (sigma_diag.array().sqrt() * z1.array()).matrix();
  if (rank() > 1) {
    out.values += std::sqrt(scale / (2.0 * (rank() - 1))) * (deviations * z2);
  }
  return out;
}

Eigen::MatrixXd SwagPosterior::covariance() const {
  Eigen::MatrixXd cov = sigma_diag.asDiagonal();
  if (rank() > 1) cov += deviations * deviations.transpose() / static_cast<double>(rank() - 1);
  return 0.5 * scale * cov;
}

SwagPosterior swag_from_iterates(std::span<const ParamVector> iterates, int rank) {
  const auto m = static_cast<int>(iterates.size());
  if (rank < 2) throw std::invalid_argument("SWAG rank must be at least 2");
  if (rank > m) throw std::invalid_argument("SWAG rank exceeds the number of iterates");
  const Eigen::Index p = iterates.front().size();

  // Welford accumulation: for any iterate list this equals mean(theta^2) -
  // mean(theta)^2, and it is exact for constant sequences.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(p);
  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd& x = iterates[static_cast<std::size_t>(i)].values;
    if (x.size() != p) throw ShapeError("SWAG iterates differ in length");
    const Eigen::VectorXd delta = x - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += (delta.array() * (x - mean).array()).matrix();
  }

  Eigen::VectorXd tail_mean = Eigen::VectorXd::Zero(p);
  for (int i = m - rank, k = 1; i < m; ++i, ++k) {
    tail_mean += (iterates[static_cast<std::size_t>(i)].values - tail_mean) / static_cast<double>(k);
  }

  SwagPosterior post;
  post.theta_swa = ParamVector{mean, iterates.front().last_layer};
  post.sigma_diag = (m2 / static_cast<double>(m)).cwiseMax(0.0);
  post.deviations.resize(p, rank);
  for (int c = 0; c < rank; ++c) {
    post.deviations.col(c) = iterates[static_cast<std::size_t>(m - rank + c)].values - tail_mean;
  }
  return post;
}

SwagPosterior fit_swag(const NetworkSpec& spec, const ParamVector& theta_map, const Dataset& data,
                       double lr, int epochs, int rank, const TrainConfig& config) {
  if (rank < 2 || rank > epochs) throw std::invalid_argument("SWAG needs epochs >= rank >= 2");
  const auto iterates = constant_sgd_iterates(spec, data, theta_map, lr, epochs, config);
  return swag_from_iterates(iterates, rank);
}

PointMassPosterior swa_point(const SwagPosterior& post) { return {post.theta_swa}; }

// --- LLLA -----------------------------------------------------------------

LllaPosterior::LllaPosterior(ParamVector theta_map, Eigen::MatrixXd ggn, double prior_precision,
                             HessianMode mode, double scale)
    : theta_map_(std::move(theta_map)),
      ggn_(std::move(ggn)),
      prior_precision_(prior_precision),
      mode_(mode),
      scale_(scale) {
  const Eigen::Index d = dim();
  if (d <= 0) throw std::invalid_argument("LLLA needs a nonempty last layer");
  if (!(prior_precision_ > 0.0)) throw std::invalid_argument("prior precision must be positive");
  if (!(scale_ > 0.0)) throw std::invalid_argument("covariance scale must be positive");
  if (mode_ == HessianMode::full) {
    if (ggn_.rows() != d || ggn_.cols() != d) throw ShapeError("full GGN must be D x D");
    Eigen::LLT<Eigen::MatrixXd> llt(precision());
    if (llt.info() != Eigen::Success) {
      throw CholeskyError("GGN + tau I is not positive definite (tau = " +
                          std::to_string(prior_precision_) + ")");
    }
    factor_ = llt.matrixL();
  } else {
    if (ggn_.rows() != d || ggn_.cols() != 1) throw ShapeError("diagonal GGN must be D x 1");
    const Eigen::VectorXd diag = ggn_.col(0).array() + prior_precision_;
    if (!(diag.array() > 0.0).all()) {
      throw CholeskyError("diagonal GGN + tau has nonpositive entries");
    }
    inv_sqrt_diag_ = diag.array().rsqrt();
  }
}

Eigen::MatrixXd LllaPosterior::precision() const {
  if (mode_ == HessianMode::full) {
    Eigen::MatrixXd p = ggn_;
    p.diagonal().array() += prior_precision_;
    return p;
  }
  return Eigen::VectorXd(ggn_.col(0).array() + prior_precision_).asDiagonal();
}

Eigen::MatrixXd LllaPosterior::covariance() const {
  if (mode_ == HessianMode::full) {
    const Eigen::Index d = dim();
    Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(d, d);
    factor_.triangularView<Eigen::Lower>().solveInPlace(inv);
    return scale_ * (inv.transpose() * inv);
  }
  return Eigen::VectorXd(scale_ * inv_sqrt_diag_.array().square()).asDiagonal();
}

Eigen::VectorXd LllaPosterior::sample_offset(Rng& rng) const {
  const Eigen::VectorXd z = rng.normal_vector(dim());
  if (mode_ == HessianMode::full) {
    // precision = L L^T, so L^{-T} z has covariance precision^{-1}.
    return std::sqrt(scale_) * factor_.transpose().triangularView<Eigen::Upper>().solve(z);
  }
  return std::sqrt(scale_) * (inv_sqrt_diag_.array() * z.array()).matrix();
}

Eigen::VectorXd LllaPosterior::sample_last_layer(Rng& rng) const {
  return last_layer_mean() + sample_offset(rng);
}

ParamVector LllaPosterior::sample(Rng& rng) const {
  ParamVector out = theta_map_;
  out.head() += sample_offset(rng);
  return out;
}

double LllaPosterior::log_density(const Eigen::VectorXd& theta_l) const {
  const Eigen::VectorXd diff = theta_l - last_layer_mean();
  const auto d = static_cast<double>(dim());
  double log_det_precision = 0.0;
  double quad = 0.0;
  if (mode_ == HessianMode::full) {
    log_det_precision = 2.0 * factor_.diagonal().array().log().sum();
    quad = (factor_.transpose() * diff).squaredNorm();
  } else {
    log_det_precision = -2.0 * inv_sqrt_diag_.array().log().sum();
    quad = (diff.array() / inv_sqrt_diag_.array()).square().sum();
  }
  return -0.5 * d * kLog2Pi + 0.5 * log_det_precision - 0.5 * d * std::log(scale_) -
         0.5 * quad / scale_;
}

double LllaPosterior::entropy() const {
  const auto d = static_cast<double>(dim());
  const double log_det_precision = mode_ == HessianMode::full
                                       ? 2.0 * factor_.diagonal().array().log().sum()
                                       : -2.0 * inv_sqrt_diag_.array().log().sum();
  return 0.5 * d * (1.0 + kLog2Pi) + 0.5 * (d * std::log(scale_) - log_det_precision);
}

LllaPosterior LllaPosterior::with_scale(double scale) const {
  if (!(scale > 0.0)) throw std::invalid_argument("covariance scale must be positive");
  LllaPosterior copy = *this;
  copy.scale_ = scale;
  return copy;
}

Eigen::MatrixXd output_hessian(const NetworkSpec& spec, const Eigen::RowVectorXd& outputs,
                               double target) {
  if (spec.head == HeadKind::classifier) {
    const double m = outputs.maxCoeff();
    Eigen::VectorXd p = (outputs.array() - m).exp().transpose();
    p /= p.sum();
    Eigen::MatrixXd h = -p * p.transpose();
    h.diagonal() += p;
    return h;
  }
  const double raw = outputs[1];
  const double v = variance_from_raw(raw);
  const double g = sigmoid(raw);
  const double e = target - outputs[0];
  Eigen::Matrix2d h;
  h(0, 0) = 1.0 / v;
  h(0, 1) = h(1, 0) = e * g / (v * v);
  h(1, 1) = g * (1.0 - g) * (v - e * e) / (2.0 * v * v) + g * g * (2.0 * e * e - v) / (2.0 * v * v * v);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(h);
  if (eig.eigenvalues().minCoeff() >= 0.0) return h;
  const Eigen::Vector2d clipped = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::MatrixXd last_layer_ggn(const NetworkSpec& spec, const ParamVector& theta,
                               const Batch& batch) {
  const int in = spec.penultimate_width();
  const int out = spec.output_width();
  const Eigen::MatrixXd phi = features(spec, theta, batch.x);
  const Eigen::MatrixXd outputs = head_outputs(spec, theta.head(), phi);
  const Eigen::MatrixXd phib = with_bias_column(phi);
  const Eigen::Index n = phi.rows();

  // weights(n, c * out + c') = Lambda_n(c, c')
  Eigen::MatrixXd weights(n, static_cast<Eigen::Index>(out) * out);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::MatrixXd lam = output_hessian(spec, outputs.row(i), batch.y[i]);
    for (int c = 0; c < out; ++c) {
      for (int c2 = 0; c2 < out; ++c2) weights(i, c * out + c2) = lam(c, c2);
    }
  }

  const Eigen::Index d = theta.last_layer.size();
  Eigen::MatrixXd ggn = Eigen::MatrixXd::Zero(d, d);
  for (int c = 0; c < out; ++c) {
    for (int c2 = c; c2 < out; ++c2) {
      const Eigen::MatrixXd block =
          phib.transpose() * (weights.col(c * out + c2).asDiagonal() * phib);
      for (int j = 0; j <= in; ++j) {
        for (int j2 = 0; j2 <= in; ++j2) {
          const Eigen::Index a = head_index(c, j, in, out);
          const Eigen::Index b = head_index(c2, j2, in, out);
          ggn(a, b) = block(j, j2);
          ggn(b, a) = block(j, j2);
        }
      }
    }
  }
  return ggn;
}

LllaPosterior fit_llla(const NetworkSpec& spec, const ParamVector& theta_map, const Dataset& data,
                       double prior_precision, HessianMode mode) {
  if (!(prior_precision > 0.0)) throw std::invalid_argument("prior precision must be positive");
  Eigen::MatrixXd ggn = last_layer_ggn(spec, theta_map, data.train());
  if (mode == HessianMode::diagonal) ggn = Eigen::MatrixXd(ggn.diagonal());
  return LllaPosterior(theta_map, std::move(ggn), prior_precision, mode);
}

OutputMoments last_layer_output_moments(const NetworkSpec& spec, const LllaPosterior& post,
                                        const Eigen::MatrixXd& x) {
  const int in = spec.penultimate_width();
  const int out = spec.output_width();
  const Eigen::MatrixXd phi = features(spec, post.theta_map(), x);
  OutputMoments m;
  m.mean = head_outputs(spec, post.theta_map().head(), phi);
  m.variance.resize(phi.rows(), out);
  m.covariance.assign(static_cast<std::size_t>(phi.rows()), Eigen::MatrixXd(out, out));
  const Eigen::MatrixXd phib = with_bias_column(phi);
  const Eigen::MatrixXd cov = post.covariance();
  Eigen::MatrixXd block(in + 1, in + 1);
  for (int c = 0; c < out; ++c) {
    for (int k = c; k < out; ++k) {
      for (int j = 0; j <= in; ++j) {
        for (int j2 = 0; j2 <= in; ++j2) {
          block(j, j2) = cov(head_index(c, j, in, out), head_index(k, j2, in, out));
        }
      }
      const Eigen::VectorXd ck = ((phib * block).array() * phib.array()).rowwise().sum();
      for (Eigen::Index n = 0; n < phi.rows(); ++n) {
        m.covariance[static_cast<std::size_t>(n)](c, k) = ck[n];
        m.covariance[static_cast<std::size_t>(n)](k, c) = ck[n];
      }
      if (k == c) m.variance.col(c) = ck;
    }
  }
  return m;
}

Eigen::MatrixXd probit_predictive(const NetworkSpec& spec, const LllaPosterior& post,
                                  const Eigen::MatrixXd& x) {
  if (spec.head != HeadKind::classifier) {
    throw std::invalid_argument("probit predictive needs a classifier head");
  }
  const OutputMoments m = last_layer_output_moments(spec, post, x);
  const Eigen::Index classes = m.mean.cols();
  Eigen::MatrixXd probs(m.mean.rows(), classes);
  for (Eigen::Index n = 0; n < m.mean.rows(); ++n) {
    const Eigen::MatrixXd& s = m.covariance[static_cast<std::size_t>(n)];
    for (Eigen::Index c = 0; c < classes; ++c) {
      double denom = 1.0;
      for (Eigen::Index k = 0; k < classes; ++k) {
        if (k == c) continue;
        const double var = std::max(0.0, s(c, c) + s(k, k) - 2.0 * s(c, k));
        const double gap = m.mean(n, c) - m.mean(n, k);
        denom += std::exp(-gap / std::sqrt(1.0 + std::numbers::pi / 8.0 * var));
      }
      probs(n, c) = 1.0 / denom;
    }
    probs.row(n) /= probs.row(n).sum();
  }
  return probs;
}

// --- Flows ----------------------------------------------------------------

Eigen::VectorXd FlowPosterior::sample_last_layer(Rng& rng) const {
  return flow_forward(flows, base.sample_last_layer(rng)).value;
}

ParamVector FlowPosterior::sample(Rng& rng) const {
  ParamVector out = base.theta_map();
  out.head() = sample_last_layer(rng);
  return out;
}

double FlowPosterior::log_density(const Eigen::VectorXd& theta_l) const {
  const Eigen::VectorXd z = flow_inverse(flows, theta_l);
  return base.log_density(z) - flow_forward(flows, z).log_det;
}

namespace {

// Flat parameter packing for Adam: per flow [z0 (D), log_alpha, beta_raw].
Eigen::VectorXd pack(const std::vector<RadialFlow>& flows, Eigen::Index d) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(flows.size()) * (d + 2));
  for (std::size_t t = 0; t < flows.size(); ++t) {
    const Eigen::Index o = static_cast<Eigen::Index>(t) * (d + 2);
    v.segment(o, d) = flows[t].z0;
    v[o + d] = flows[t].log_alpha;
    v[o + d + 1] = flows[t].beta_raw;
  }
  return v;
}

void unpack(const Eigen::VectorXd& v, std::vector<RadialFlow>& flows, Eigen::Index d) {
  for (std::size_t t = 0; t < flows.size(); ++t) {
    const Eigen::Index o = static_cast<Eigen::Index>(t) * (d + 2);
    flows[t].z0 = v.segment(o, d);
    flows[t].log_alpha = v[o + d];
    flows[t].beta_raw = v[o + d + 1];
  }
}

Eigen::VectorXd pack_grads(const std::vector<RadialFlowGrad>& grads, Eigen::Index d) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(grads.size()) * (d + 2));
  for (std::size_t t = 0; t < grads.size(); ++t) {
    const Eigen::Index o = static_cast<Eigen::Index>(t) * (d + 2);
    v.segment(o, d) = grads[t].z0;
    v[o + d] = grads[t].log_alpha;
    v[o + d + 1] = grads[t].beta_raw;
  }
  return v;
}

std::vector<RadialFlow> init_flows(const LllaPosterior& base, int count, double noise, Rng& rng) {
  const Eigen::VectorXd mean = base.last_layer_mean();
  const Eigen::VectorXd stddev = base.covariance().diagonal().cwiseSqrt();
  const double log_alpha = std::log(std::sqrt(stddev.squaredNorm()));
  std::vector<RadialFlow> flows;
  flows.reserve(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) {
    const Eigen::VectorXd z0 =
        mean + noise * (stddev.array() * rng.normal_vector(mean.size()).array()).matrix();
    flows.push_back(RadialFlow::identity(z0, log_alpha));
  }
  return flows;
}

}  // namespace

double estimate_elbo(const FlowPosterior& post, const LastLayerTarget& target,
                     Eigen::Index n_rows, int samples, std::uint64_t seed) {
  std::vector<Eigen::Index> all(static_cast<std::size_t>(n_rows));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  Rng rng(seed);
  double total = 0.0;
  for (int s = 0; s < samples; ++s) {
    const FlowOutput f = flow_forward(post.flows, post.base.sample_last_layer(rng));
    total += target(f.value, all).log_density + f.log_det;
  }
  return total / samples + post.base.entropy();
}

FlowFitResult fit_radial_flows(const LllaPosterior& base, const LastLayerTarget& target,
                               Eigen::Index n_rows, const FlowFitOptions& options,
                               const std::function<double(const FlowPosterior&)>& validation) {
  if (options.num_flows < 0) throw std::invalid_argument("flow count must be >= 0");
  if (options.epochs < 0) throw std::invalid_argument("flow epochs must be >= 0");
  if (options.mc_samples < 1 || options.batch_size < 1 || n_rows < 1) {
    throw std::invalid_argument("flow fitting needs samples, rows and a positive batch size");
  }
  const Eigen::Index d = base.dim();
  Rng rng(derive_seed(options.seed, "flow"));
  FlowFitResult result{FlowPosterior{base, init_flows(base, options.num_flows, options.init_noise, rng)},
                       {}, {}, {}, 0};
  FlowPosterior current = result.posterior;
  double best_val = -std::numeric_limits<double>::infinity();
  if (validation) {
    best_val = validation(current);
    result.val_elpd_trace.push_back(best_val);
  }
  if (options.num_flows == 0 || options.epochs == 0) return result;

  const double entropy = base.entropy();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_rows));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto steps_per_epoch =
      static_cast<int>((n_rows + options.batch_size - 1) / options.batch_size);
  const int total_steps = steps_per_epoch * options.epochs;

  Eigen::VectorXd params = pack(current.flows, d);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(params.size());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(params.size());
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  int step = 0;
  std::vector<Eigen::VectorXd> trajectory;
  std::vector<RadialFlowGrad> grads;
  double running_best = -std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_elbo = 0.0;
    for (int b = 0; b < steps_per_epoch; ++b) {
      const std::size_t start = static_cast<std::size_t>(b) * options.batch_size;
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      const std::span<const Eigen::Index> rows(order.data() + start, stop - start);

      grads.assign(current.flows.size(), RadialFlowGrad{});
      double elbo = 0.0;
      for (int s = 0; s < options.mc_samples; ++s) {
        const Eigen::VectorXd z = base.sample_last_layer(rng);
        const FlowOutput f = flow_forward(current.flows, z, trajectory);
        const TargetValue tv = target(f.value, rows);
        elbo += tv.log_density + f.log_det;
        flow_backward(current.flows, trajectory, tv.grad, 1.0, grads);
      }
      elbo = elbo / options.mc_samples + entropy;
      Eigen::VectorXd g = pack_grads(grads, d) / options.mc_samples;
      if (!std::isfinite(elbo) || !g.allFinite()) {
        throw DivergenceError("non-finite ELBO during flow fitting at epoch " +
                              std::to_string(epoch));
      }
      epoch_elbo += elbo;

      ++step;
      const double lr = options.lr * 0.5 *
                        (1.0 + std::cos(std::numbers::pi * (step - 1) / std::max(1, total_steps)));
      m1 = kBeta1 * m1 + (1.0 - kBeta1) * g;
      m2 = kBeta2 * m2 + (1.0 - kBeta2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(kBeta1, step);
      const double c2 = 1.0 - std::pow(kBeta2, step);
      params += (lr * (m1 / c1).array() / ((m2 / c2).array().sqrt() + kEps)).matrix();
      unpack(params, current.flows, d);
    }
    epoch_elbo /= steps_per_epoch;
    result.elbo_trace.push_back(epoch_elbo);
    running_best = std::max(running_best, epoch_elbo);
    result.best_elbo_trace.push_back(running_best);

    if (validation) {
      const double v = validation(current);
      result.val_elpd_trace.push_back(v);
      if (v > best_val) {
        best_val = v;
        result.posterior = current;
        result.best_epoch = epoch;
      }
    }
  }
  if (!validation) {
    result.posterior = current;
    result.best_epoch = options.epochs;
  }
  return result;
}

FlowFitResult fit_flow(const NetworkSpec& spec, const LllaPosterior& base, const Dataset& data,
                       const FlowFitOptions& options) {
  const Batch train = data.train();
  const Batch val = data.val();
  const Eigen::MatrixXd phi_train = features(spec, base.theta_map(), train.x);
  const Eigen::MatrixXd phi_val = features(spec, base.theta_map(), val.x);
  const double tau = base.prior_precision();
  const double n_train = static_cast<double>(train.size());

  const LastLayerTarget target = [&](const Eigen::VectorXd& head,
                                     std::span<const Eigen::Index> rows) {
    TargetValue tv;
    const double ratio = n_train / static_cast<double>(rows.size());
    tv.log_density = ratio * head_log_likelihood(spec, phi_train, train.y, head, rows, &tv.grad) -
                     0.5 * tau * head.squaredNorm();
    tv.grad = ratio * tv.grad - tau * head;
    return tv;
  };
  const std::uint64_t val_seed = derive_seed(options.seed, "flow-validation");
  const auto validation = [&](const FlowPosterior& post) {
    Rng rng(val_seed);
    std::vector<Eigen::VectorXd> heads;
    heads.reserve(static_cast<std::size_t>(options.val_samples));
    for (int s = 0; s < options.val_samples; ++s) heads.push_back(post.sample_last_layer(rng));
    return heads_elpd(spec, phi_val, val.y, heads);
  };
  FlowFitOptions opts = options;
  if (opts.batch_size > train.size()) opts.batch_size = static_cast<int>(train.size());
  return fit_radial_flows(base, target, train.size(), opts, validation);
}

// --- Variant helpers ------------------------------------------------------

ParamVector sample(const Posterior& post, Rng& rng) {
  return std::visit([&rng](const auto& p) { return p.sample(rng); }, post);
}

const ParamVector& center(const Posterior& post) {
  struct Visitor {
    const ParamVector& operator()(const PointMassPosterior& p) const { return p.center; }
    const ParamVector& operator()(const SwagPosterior& p) const { return p.theta_swa; }
    const ParamVector& operator()(const LllaPosterior& p) const { return p.theta_map(); }
    const ParamVector& operator()(const FlowPosterior& p) const { return p.base.theta_map(); }
  };
  return std::visit(Visitor{}, post);
}

std::string variant_name(const Posterior& post) {
  static constexpr const char* kNames[] = {"point_mass", "swag", "llla", "llla_flow"};
  return kNames[post.index()];
}

Posterior scale_covariance(const Posterior& post, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("covariance scale must be positive");
  struct Visitor {
    double lambda;
    Posterior operator()(const PointMassPosterior& p) const { return p; }
    Posterior operator()(const SwagPosterior& p) const {
      SwagPosterior q = p;
      q.scale *= lambda;
      return q;
    }
    Posterior operator()(const LllaPosterior& p) const { return p.with_scale(p.scale() * lambda); }
    Posterior operator()(const FlowPosterior& p) const {
      return FlowPosterior{p.base.with_scale(p.base.scale() * lambda), p.flows};
    }
  };
  return std::visit(Visitor{lambda}, post);
}

double mc_elpd(const NetworkSpec& spec, const Posterior& post, const Batch& batch, int samples,
               std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  Rng rng(seed);
  std::vector<ParamVector> draws;
  draws.reserve(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) draws.push_back(sample(post, rng));
  return mc_elpd(sample_log_likelihoods(spec, draws, batch));
}

// --- Tuning ---------------------------------------------------------------

std::vector<double> log_spaced(double lo, double hi, int count) {
  if (count < 1 || !(lo > 0.0) || !(hi > 0.0)) throw std::invalid_argument("bad log grid");
  std::vector<double> grid;
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (int i = 0; i < count; ++i) {
    const double e = count == 1 ? a : a + (b - a) * i / (count - 1);
    grid.push_back(std::pow(10.0, e));
  }
  return grid;
}

std::vector<double> default_prior_precision_grid() { return log_spaced(1e-4, 1e4, 21); }
std::vector<double> default_swag_lr_grid() { return log_spaced(1e-4, 1e-1, 21); }
std::vector<double> default_flow_prior_grid() {
  return {1, 5, 10, 20, 30, 40, 50, 70, 90, 100, 125, 150, 175, 200, 500};
}

PriorTuneResult tune_prior_precision(const NetworkSpec& spec, const ParamVector& theta_map,
                                     const Dataset& data, std::span<const double> grid,
                                     int samples, std::uint64_t seed, HessianMode mode,
                                     SelectionCriterion criterion) {
  if (grid.empty()) throw std::invalid_argument("prior precision grid is empty");
  Eigen::MatrixXd ggn = last_layer_ggn(spec, theta_map, data.train());
  if (mode == HessianMode::diagonal) ggn = Eigen::MatrixXd(ggn.diagonal());
  const Batch val = data.val();

  TuningTable table{"prior_precision", {"prior_precision", "val_elpd"}, {}};
  std::optional<PriorTuneResult> best;
  for (double tau : grid) {
    double elpd = std::numeric_limits<double>::quiet_NaN();
    try {
      LllaPosterior post(theta_map, ggn, tau, mode);
      if (criterion == SelectionCriterion::probit) {
        const Eigen::MatrixXd probs = probit_predictive(spec, post, val.x);
        double total = 0.0;
        for (Eigen::Index n = 0; n < val.size(); ++n) {
          total += std::log(std::max(probs(n, static_cast<Eigen::Index>(val.y[n])), 1e-300));
        }
        elpd = total / static_cast<double>(val.size());
      } else {
        elpd = mc_elpd(spec, Posterior{post}, val, samples, seed);
      }
      if (std::isfinite(elpd) &&
          (!best || elpd > best->val_elpd ||
           (elpd == best->val_elpd && tau > best->prior_precision))) {
        best.emplace(PriorTuneResult{tau, elpd, std::move(post), {}});
      }
    } catch (const CholeskyError&) {
      elpd = std::numeric_limits<double>::quiet_NaN();
    }
    table.rows.push_back({tau, elpd});
  }
  if (!best) throw std::runtime_error("every prior precision in the grid failed");
  best->table = std::move(table);
  return std::move(*best);
}

SwagTuneResult tune_swag_lr(const NetworkSpec& spec, const ParamVector& theta_map,
                            const Dataset& data, std::span<const double> grid, int epochs,
                            int rank, int samples, const TrainConfig& config, std::uint64_t seed) {
  if (grid.empty()) throw std::invalid_argument("learning rate grid is empty");
  const Batch val = data.val();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  TuningTable table{"lr", {"lr", "swag_val_elpd", "swa_val_elpd"}, {}};
  std::optional<std::pair<double, SwagPosterior>> best_swag;
  std::optional<std::pair<double, PointMassPosterior>> best_swa;
  double best_swag_elpd = -std::numeric_limits<double>::infinity();
  double best_swa_elpd = -std::numeric_limits<double>::infinity();

  for (double lr : grid) {
    double swag_elpd = nan;
    double swa_elpd = nan;
    try {
      SwagPosterior post = fit_swag(spec, theta_map, data, lr, epochs, rank, config);
      swag_elpd = mc_elpd(spec, Posterior{post}, val, samples, seed);
      swa_elpd = point_elpd(spec, post.theta_swa, val);
      if (!std::isfinite(swag_elpd) || !std::isfinite(swa_elpd)) {
        swag_elpd = swa_elpd = nan;
      } else {
        if (swag_elpd > best_swag_elpd ||
            (swag_elpd == best_swag_elpd && best_swag && lr < best_swag->first)) {
          best_swag_elpd = swag_elpd;
          best_swag.emplace(lr, post);
        }
        if (swa_elpd > best_swa_elpd ||
            (swa_elpd == best_swa_elpd && best_swa && lr < best_swa->first)) {
          best_swa_elpd = swa_elpd;
          best_swa.emplace(lr, swa_point(post));
        }
      }
    } catch (const DivergenceError&) {
      swag_elpd = swa_elpd = nan;
    }
    table.rows.push_back({lr, swag_elpd, swa_elpd});
  }
  if (!best_swag || !best_swa) throw std::runtime_error("every SWAG learning rate diverged");
  return SwagTuneResult{best_swag->first, best_swa->first, std::move(best_swag->second),
                        std::move(best_swa->second), std::move(table)};
}

FlowTuneResult tune_flow(const NetworkSpec& spec, const ParamVector& theta_map,
                         const Dataset& data, std::span<const double> grid,
                         const FlowFitOptions& options, HessianMode mode) {
  if (grid.empty()) throw std::invalid_argument("flow prior grid is empty");
  Eigen::MatrixXd ggn = last_layer_ggn(spec, theta_map, data.train());
  if (mode == HessianMode::diagonal) ggn = Eigen::MatrixXd(ggn.diagonal());
  TuningTable table{"prior_precision", {"prior_precision", "val_elpd", "best_epoch"}, {}};
  std::optional<FlowTuneResult> best;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (double tau : grid) {
    try {
      LllaPosterior base(theta_map, ggn, tau, mode);
      FlowFitResult fit = fit_flow(spec, base, data, options);
      const double elpd = fit.val_elpd_trace.empty()
                              ? nan
                              : *std::max_element(fit.val_elpd_trace.begin(), fit.val_elpd_trace.end());
      table.rows.push_back({tau, elpd, static_cast<double>(fit.best_epoch)});
      if (std::isfinite(elpd) && (!best || elpd > best->val_elpd ||
                                  (elpd == best->val_elpd && tau > best->prior_precision))) {
        best.emplace(FlowTuneResult{tau, elpd, std::move(fit.posterior), {}});
      }
    } catch (const CholeskyError&) {
      table.rows.push_back({tau, nan, nan});
    } catch (const DivergenceError&) {
      table.rows.push_back({tau, nan, nan});
    }
  }
  if (!best) throw std::runtime_error("every flow prior precision failed");
  best->table = std::move(table);
  return std::move(*best);
}

}  // namespace debnn
