#include "debnn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace debnn {

namespace {

using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

// Offset of the weight block of affine map `layer`.
Eigen::Index layer_offset(const NetworkSpec& spec, int layer) {
  Eigen::Index off = 0;
  for (int l = 0; l < layer; ++l) {
    off += static_cast<Eigen::Index>(spec.layer_widths[l + 1]) * (spec.layer_widths[l] + 1);
  }
  return off;
}

void apply_activation(Activation act, Eigen::MatrixXd& z) {
  if (act == Activation::tanh) {
    z = z.array().tanh();
  } else {
    z = z.cwiseMax(0.0);
  }
}

// Affine map: rows of `a` times W^T plus bias.
Eigen::MatrixXd affine(const double* params, int in, int out, const Eigen::MatrixXd& a) {
  RowMajorMap w(params, out, in);
  Eigen::Map<const Eigen::RowVectorXd> b(params + static_cast<Eigen::Index>(out) * in, out);
  Eigen::MatrixXd z = a * w.transpose();
  z.rowwise() += b;
  return z;
}

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

NetworkSpec NetworkSpec::classifier(std::vector<int> hidden, int input_width, int num_classes,
                                    Activation act) {
  NetworkSpec spec;
  spec.layer_widths.push_back(input_width);
  spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
  spec.layer_widths.push_back(num_classes);
  spec.activation = act;
  spec.head = HeadKind::classifier;
  spec.num_classes = num_classes;
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::regressor(std::vector<int> hidden, int input_width, Activation act) {
  NetworkSpec spec;
  spec.layer_widths.push_back(input_width);
  spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
  spec.layer_widths.push_back(2);
  spec.activation = act;
  spec.head = HeadKind::heteroscedastic_regressor;
  spec.num_classes = 0;
  spec.validate();
  return spec;
}

void NetworkSpec::validate() const {
  if (layer_widths.size() < 2) {
    throw std::invalid_argument("NetworkSpec needs at least an input and an output layer");
  }
  for (int w : layer_widths) {
    if (w <= 0) throw std::invalid_argument("NetworkSpec layer widths must be positive");
  }
  if (head == HeadKind::classifier) {
    if (num_classes < 2 || output_width() != num_classes) {
      throw std::invalid_argument("classifier output width must equal the class count (>= 2)");
    }
  } else if (output_width() != 2) {
    throw std::invalid_argument("heteroscedastic head must have output width 2");
  }
}

Eigen::Index param_count(const NetworkSpec& spec) { return layer_offset(spec, spec.num_affine()); }

Partition last_layer_partition(const NetworkSpec& spec) {
  return {layer_offset(spec, spec.num_affine() - 1), param_count(spec)};
}

ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "init"));
  ParamVector theta{Eigen::VectorXd(param_count(spec)), last_layer_partition(spec)};
  Eigen::Index k = 0;
  for (int l = 0; l < spec.num_affine(); ++l) {
    const int in = spec.layer_widths[l];
    const int out = spec.layer_widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    const Eigen::Index count = static_cast<Eigen::Index>(out) * (in + 1);
    for (Eigen::Index i = 0; i < count; ++i) theta.values[k++] = bound * (2.0 * rng.uniform() - 1.0);
  }
  return theta;
}

void check_params(const NetworkSpec& spec, const ParamVector& theta) {
  if (theta.size() != param_count(spec)) {
    throw ShapeError("parameter vector length " + std::to_string(theta.size()) +
                     " does not match network (" + std::to_string(param_count(spec)) + ")");
  }
  if (!(theta.last_layer == last_layer_partition(spec))) {
    throw ShapeError("parameter partition does not match the network's last layer");
  }
}

Eigen::MatrixXd features(const NetworkSpec& spec, const ParamVector& theta,
                         const Eigen::MatrixXd& x) {
  check_params(spec, theta);
  if (x.cols() != spec.input_width()) {
    throw ShapeError("input width " + std::to_string(x.cols()) + " does not match network input " +
                     std::to_string(spec.input_width()));
  }
  Eigen::MatrixXd a = x;
  for (int l = 0; l + 1 < spec.num_affine(); ++l) {
    a = affine(theta.values.data() + layer_offset(spec, l), spec.layer_widths[l],
               spec.layer_widths[l + 1], a);
    apply_activation(spec.activation, a);
  }
  return a;
}

Eigen::MatrixXd head_outputs(const NetworkSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& head,
                             const Eigen::MatrixXd& phi) {
  const int in = spec.penultimate_width();
  const int out = spec.output_width();
  if (head.size() != static_cast<Eigen::Index>(out) * (in + 1) || phi.cols() != in) {
    throw ShapeError("last-layer parameters or features have the wrong shape");
  }
  return affine(head.data(), in, out, phi);
}

Eigen::MatrixXd forward(const NetworkSpec& spec, const ParamVector& theta,
                        const Eigen::MatrixXd& x) {
  return head_outputs(spec, theta.head(), features(spec, theta, x));
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::VectorXd log_likelihood(const NetworkSpec& spec, const Eigen::MatrixXd& outputs,
                               const Eigen::VectorXd& y) {
  if (outputs.rows() != y.size() || outputs.cols() != spec.output_width()) {
    throw ShapeError("outputs and targets disagree in shape");
  }
  Eigen::VectorXd ll(y.size());
  if (spec.head == HeadKind::classifier) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const auto label = static_cast<Eigen::Index>(y[i]);
      if (label < 0 || label >= spec.num_classes || static_cast<double>(label) != y[i]) {
        throw std::invalid_argument("class target out of range");
      }
      ll[i] = outputs(i, label) - log_sum_exp(outputs.row(i));
    }
  } else {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double v = variance_from_raw(outputs(i, 1));
      const double e = y[i] - outputs(i, 0);
      ll[i] = -kHalfLog2Pi - 0.5 * std::log(v) - 0.5 * e * e / v;
    }
  }
  return ll;
}

LossValue nll_and_grad(const NetworkSpec& spec, const ParamVector& theta, const Batch& batch,
                       double weight_decay, Eigen::Index n_total) {
  check_params(spec, theta);
  const Eigen::Index n = batch.size();
  if (n == 0) throw std::invalid_argument("nll_and_grad needs a nonempty batch");
  if (batch.x.cols() != spec.input_width()) throw ShapeError("batch input width mismatch");
  if (n_total <= 0) n_total = n;

  const int n_maps = spec.num_affine();
  std::vector<Eigen::MatrixXd> acts;  // acts[l] is the input of map l
  acts.reserve(n_maps);
  acts.push_back(batch.x);
  for (int l = 0; l + 1 < n_maps; ++l) {
    Eigen::MatrixXd z = affine(theta.values.data() + layer_offset(spec, l), spec.layer_widths[l],
                               spec.layer_widths[l + 1], acts.back());
    apply_activation(spec.activation, z);
    acts.push_back(std::move(z));
  }
  const Eigen::MatrixXd out =
      affine(theta.values.data() + layer_offset(spec, n_maps - 1), spec.layer_widths[n_maps - 1],
             spec.layer_widths[n_maps], acts.back());

  LossValue loss;
  Eigen::MatrixXd delta(n, out.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  if (spec.head == HeadKind::classifier) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto label = static_cast<Eigen::Index>(batch.y[i]);
      if (label < 0 || label >= spec.num_classes || static_cast<double>(label) != batch.y[i]) {
        throw std::invalid_argument("class target out of range");
      }
      const double lse = log_sum_exp(out.row(i));
      total += lse - out(i, label);
      delta.row(i) = (out.row(i).array() - lse).exp() * inv_n;
      delta(i, label) -= inv_n;
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double raw = out(i, 1);
      const double v = variance_from_raw(raw);
      const double e = batch.y[i] - out(i, 0);
      total += kHalfLog2Pi + 0.5 * std::log(v) + 0.5 * e * e / v;
      delta(i, 0) = -e / v * inv_n;
      delta(i, 1) = sigmoid(raw) * (0.5 / v - 0.5 * e * e / (v * v)) * inv_n;
    }
  }
  loss.nll = total * inv_n;

  loss.grad = Eigen::VectorXd::Zero(theta.size());
  for (int l = n_maps - 1; l >= 0; --l) {
    const int in = spec.layer_widths[l];
    const int outw = spec.layer_widths[l + 1];
    const Eigen::Index off = layer_offset(spec, l);
    RowMajorMutMap gw(loss.grad.data() + off, outw, in);
    gw = delta.transpose() * acts[l];
    loss.grad.segment(off + static_cast<Eigen::Index>(outw) * in, outw) =
        delta.colwise().sum().transpose();
    if (l == 0) break;
    RowMajorMap w(theta.values.data() + off, outw, in);
    Eigen::MatrixXd back = delta * w;
    const Eigen::MatrixXd& a = acts[l];
    if (spec.activation == Activation::tanh) {
      delta = back.array() * (1.0 - a.array().square());
    } else {
      delta = back.array() * (a.array() > 0.0).cast<double>();
    }
  }

  const double scale = weight_decay / static_cast<double>(n_total);
  loss.penalty = 0.5 * scale * theta.values.squaredNorm();
  loss.grad += scale * theta.values;
  return loss;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be nonnegative");
  if (early_stop_patience && *early_stop_patience < 1) {
    throw std::invalid_argument("early stopping patience must be >= 1");
  }
}

namespace {

// One pass over shuffled rows. Returns the mean batch objective.
double sgd_epoch(const BatchObjective& objective, Eigen::VectorXd& theta,
                 Eigen::VectorXd& velocity, std::vector<Eigen::Index>& order, int batch_size,
                 double lr, double momentum, Rng& rng) {
  rng.shuffle(order);
  double sum = 0.0;
  int batches = 0;
  const auto n = order.size();
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(n, start + static_cast<std::size_t>(batch_size));
    const std::span<const Eigen::Index> rows(order.data() + start, stop - start);
    const LossValue loss = objective(rows, theta);
    if (!std::isfinite(loss.objective()) || !loss.grad.allFinite()) {
      return std::numeric_limits<double>::quiet_NaN();
    }
    velocity = momentum * velocity + loss.grad;
    theta -= lr * velocity;
    sum += loss.objective();
    ++batches;
  }
  return batches ? sum / batches : 0.0;
}

BatchObjective network_objective(const NetworkSpec& spec, const Batch& train,
                                 const Partition& partition, double weight_decay) {
  return [&spec, &train, partition, weight_decay](std::span<const Eigen::Index> rows,
                                                  const Eigen::VectorXd& theta) {
    Batch b{Eigen::MatrixXd(rows.size(), train.x.cols()), Eigen::VectorXd(rows.size())};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      b.x.row(static_cast<Eigen::Index>(i)) = train.x.row(rows[i]);
      b.y[static_cast<Eigen::Index>(i)] = train.y[rows[i]];
    }
    return nll_and_grad(spec, ParamVector{theta, partition}, b, weight_decay, train.size());
  };
}

}  // namespace

std::vector<Eigen::MatrixXd> sample_outputs(const NetworkSpec& spec,
                                            std::span<const ParamVector> samples,
                                            const Eigen::MatrixXd& x) {
  std::vector<Eigen::MatrixXd> outs;
  outs.reserve(samples.size());
  Eigen::MatrixXd phi;
  const ParamVector* cached = nullptr;
  for (const ParamVector& theta : samples) {
    if (cached == nullptr || cached->last_layer.begin != theta.last_layer.begin ||
        cached->body() != theta.body()) {
      phi = features(spec, theta, x);
      cached = &theta;
    } else {
      check_params(spec, theta);
    }
    outs.push_back(head_outputs(spec, theta.head(), phi));
  }
  return outs;
}

Eigen::MatrixXd sample_log_likelihoods(const NetworkSpec& spec,
                                       std::span<const ParamVector> samples, const Batch& batch) {
  const auto outs = sample_outputs(spec, samples, batch.x);
  Eigen::MatrixXd ll(batch.size(), static_cast<Eigen::Index>(outs.size()));
  for (std::size_t s = 0; s < outs.size(); ++s) {
    ll.col(static_cast<Eigen::Index>(s)) = log_likelihood(spec, outs[s], batch.y);
  }
  return ll;
}

double mc_elpd(const Eigen::MatrixXd& sample_ll) {
  if (sample_ll.cols() == 0 || sample_ll.rows() == 0) {
    throw std::invalid_argument("mc_elpd needs at least one sample and one row");
  }
  const double log_s = std::log(static_cast<double>(sample_ll.cols()));
  double total = 0.0;
  for (Eigen::Index n = 0; n < sample_ll.rows(); ++n) {
    total += log_sum_exp(sample_ll.row(n)) - log_s;
  }
  return total / static_cast<double>(sample_ll.rows());
}

double point_elpd(const NetworkSpec& spec, const ParamVector& theta, const Batch& batch) {
  return log_likelihood(spec, forward(spec, theta, batch.x), batch.y).mean();
}

TrainResult train_map(const NetworkSpec& spec, const Dataset& data, const TrainConfig& config) {
  spec.validate();
  config.validate();
  if (data.splits.train.empty() || data.splits.val.empty()) {
    throw std::invalid_argument("train_map needs nonempty train and validation splits");
  }
  const Batch train = data.train();
  const Batch val = data.val();

  TrainResult result;
  result.theta = init_params(spec, config.seed);
  if (config.epochs == 0) return result;

  const Partition partition = result.theta.last_layer;
  const BatchObjective objective = network_objective(spec, train, partition, config.weight_decay);
  Rng rng(derive_seed(config.seed, "shuffle"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  Eigen::VectorXd theta = result.theta.values;
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(theta.size());

  const bool early_stop = config.early_stop_patience.has_value();
  Eigen::VectorXd best = theta;
  double best_elpd = -std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double lr = config.lr;
    if (config.lr_schedule == LrSchedule::cosine) {
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * (epoch - 1) / config.epochs));
    }
    const double train_nll =
        sgd_epoch(objective, theta, velocity, order, config.batch_size, lr, config.momentum, rng);
    if (!std::isfinite(train_nll)) {
      throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) +
                            " (lr " + std::to_string(lr) + ")");
    }
    const double val_elpd = point_elpd(spec, ParamVector{theta, partition}, val);
    result.trace.push_back({epoch, train_nll, val_elpd});
    if (val_elpd > best_elpd) {
      best_elpd = val_elpd;
      best = theta;
      result.best_epoch = epoch;
    }
    if (early_stop && epoch - result.best_epoch >= *config.early_stop_patience) break;
  }

  if (early_stop) {
    result.theta.values = best;
  } else {
    result.theta.values = theta;
    result.best_epoch = result.trace.back().epoch;
  }
  return result;
}

std::vector<Eigen::VectorXd> constant_sgd_iterates(const BatchObjective& objective,
                                                   const Eigen::VectorXd& theta_start,
                                                   Eigen::Index n_rows, double lr, int epochs,
                                                   const SgdOptions& options) {
  if (epochs < 1) throw std::invalid_argument("constant SGD needs at least one epoch");
  if (lr < 0.0) throw std::invalid_argument("learning rate must be nonnegative");
  if (n_rows < 1) throw std::invalid_argument("constant SGD needs training rows");
  Rng rng(derive_seed(options.seed, "constant-sgd"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_rows));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  Eigen::VectorXd theta = theta_start;
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(theta.size());
  std::vector<Eigen::VectorXd> iterates;
  iterates.reserve(static_cast<std::size_t>(epochs));
  for (int m = 0; m < epochs; ++m) {
    const double loss =
        sgd_epoch(objective, theta, velocity, order, options.batch_size, lr, options.momentum, rng);
    if (!std::isfinite(loss) || !theta.allFinite()) {
      throw DivergenceError("constant SGD diverged at learning rate " + std::to_string(lr));
    }
    iterates.push_back(theta);
  }
  return iterates;
}

std::vector<ParamVector> constant_sgd_iterates(const NetworkSpec& spec, const Dataset& data,
                                               const ParamVector& theta_start, double lr,
                                               int epochs, const TrainConfig& config) {
  check_params(spec, theta_start);
  const Batch train = data.train();
  const BatchObjective objective =
      network_objective(spec, train, theta_start.last_layer, config.weight_decay);
  const SgdOptions options{config.batch_size, config.momentum, config.seed};
  auto raw = constant_sgd_iterates(objective, theta_start.values, train.size(), lr, epochs, options);
  std::vector<ParamVector> out;
  out.reserve(raw.size());
  for (auto& v : raw) out.push_back(ParamVector{std::move(v), theta_start.last_layer});
  return out;
}

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }
std::string to_string(HeadKind h) {
  return h == HeadKind::classifier ? "classifier" : "heteroscedastic_regressor";
}
std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

HeadKind head_from_string(const std::string& s) {
  if (s == "classifier") return HeadKind::classifier;
  if (s == "heteroscedastic_regressor") return HeadKind::heteroscedastic_regressor;
  throw std::invalid_argument("unknown head '" + s + "'");
}

LrSchedule schedule_from_string(const std::string& s) {
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "constant") return LrSchedule::constant;
  throw std::invalid_argument("unknown lr schedule '" + s + "'");
}

}  // namespace debnn
