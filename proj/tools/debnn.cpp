// Command line driver for the experiment pipeline.
//
//   debnn [options] <command>
//   debnn --config study.toml evaluate --workers 4
//
// Every option can also be set in the --config file (TOML or INI); command
// line values win.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "debnn/harness.hpp"

namespace {

using debnn::Command;
using debnn::ExperimentConfig;

void add_config_options(CLI::App& app, ExperimentConfig& c, std::string& activation,
                        std::string& schedule, int& patience) {
  app.add_option("--name", c.name, "Study name");
  app.add_option("--dataset", c.data.kind, "two_moons | spirals | regression")
      ->check(CLI::IsMember({"two_moons", "spirals", "regression"}));
  app.add_option("--n", c.data.n, "Dataset size (train + val + test)");
  app.add_option("--noise", c.data.noise, "Generator noise level");
  app.add_option("--classes", c.data.num_classes, "Number of classes");
  app.add_option("--data-seed", c.data.seed, "Dataset generator seed");
  app.add_option("--ood", c.data.ood, "OOD set (empty: task default)");
  app.add_option("--hidden", c.hidden, "Hidden layer widths")->delimiter(',');
  app.add_option("--activation", activation, "tanh | relu");
  app.add_option("--epochs", c.train.epochs, "MAP training epochs");
  app.add_option("--batch-size", c.train.batch_size, "Minibatch size");
  app.add_option("--lr", c.train.lr, "MAP learning rate");
  app.add_option("--momentum", c.train.momentum, "SGD momentum");
  app.add_option("--weight-decay", c.train.weight_decay, "Weight decay (prior precision)");
  app.add_option("--lr-schedule", schedule, "constant | cosine");
  app.add_option("--patience", patience, "Early stopping patience in epochs (0 disables)");
  app.add_option("--pool-size", c.pool_size, "MAP models per pool");
  app.add_option("--ks", c.ks, "Ensemble sizes")->delimiter(',');
  app.add_option("--draws", c.n_draws, "Ensemble draws per K");
  app.add_option("--s-select", c.s_select, "MC samples for tuning");
  app.add_option("--s-test", c.s_test, "MC samples for evaluation");
  app.add_option("--methods", c.methods, "Evaluated methods")->delimiter(',');
  app.add_option("--flow-lengths", c.flow_lengths, "Radial flow lengths T")->delimiter(',');
  app.add_option("--prior-precision-grid", c.prior_precision_grid)->delimiter(',');
  app.add_option("--swag-lr-grid", c.swag_lr_grid)->delimiter(',');
  app.add_option("--flow-prior-grid", c.flow_prior_grid)->delimiter(',');
  app.add_option("--swag-epochs", c.swag_epochs, "SWAG iterates M (one per epoch)");
  app.add_option("--swag-rank", c.swag_rank, "SWAG deviation rank R");
  app.add_option("--flow-epochs", c.flow_epochs, "Flow training epochs");
  app.add_option("--flow-lr", c.flow_lr, "Flow Adam learning rate");
  app.add_option("--flow-mc", c.flow_mc_samples, "MC samples per ELBO estimate");
  app.add_option("--ablate-samples", c.ablate_samples, "Sample counts for the S ablation")
      ->delimiter(',');
  app.add_option("--ablate-k", c.ablate_k, "Ensemble size for the S ablation");
  app.add_option("--lambdas", c.lambdas, "Covariance scales")->delimiter(',');
  app.add_option("--lambda-methods", c.lambda_methods)->delimiter(',');
  app.add_option("--ece-bins", c.ece_bins, "Calibration bins");
  app.add_option("--seed", c.seed, "Master seed");
  app.add_option("--workers", c.workers, "Concurrent tasks");
  app.add_option("--work-dir", c.work_dir, "Artifact directory");
}

// The dataset kind picks the training defaults, so it is read before the
// real parse. Errors are left for the real parse to report.
std::string dataset_kind(int argc, char** argv) {
  std::string kind = "two_moons";
  CLI::App pre;
  pre.allow_extras();
  pre.allow_config_extras(true);
  pre.set_config("--config");
  pre.add_option("--dataset", kind);
  try {
    pre.parse(argc, argv);
  } catch (const CLI::Error&) {
  }
  return kind;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian deep ensemble experiments"};
  app.set_config("--config", "", "TOML/INI file with option values");
  app.fallthrough();
  app.require_subcommand(1, 1);

  ExperimentConfig config = debnn::default_config(dataset_kind(argc, argv));
  std::string activation = debnn::to_string(config.activation);
  std::string schedule = debnn::to_string(config.train.lr_schedule);
  int patience = config.train.early_stop_patience.value_or(0);
  add_config_options(app, config, activation, schedule, patience);

  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the resolved configuration as JSON and exit");

  std::vector<std::pair<std::string, Command>> commands = {
      {"data", Command::data},
      {"train-pool", Command::train_pool},
      {"fit-posteriors", Command::fit_posteriors},
      {"evaluate", Command::evaluate},
      {"ablate-samples", Command::ablate_samples},
      {"sweep-lambda", Command::sweep_lambda},
      {"ood", Command::ood},
      {"stacking", Command::stacking},
      {"rank", Command::rank},
      {"report", Command::report},
  };
  for (const auto& [name, cmd] : commands) app.add_subcommand(name, "Run '" + name + "' and anything it needs");
  app.add_subcommand("pipeline", "Run every stage");

  CLI11_PARSE(app, argc, argv);

  try {
    config.activation = debnn::activation_from_string(activation);
    config.train.lr_schedule = debnn::schedule_from_string(schedule);
    config.train.early_stop_patience = patience > 0 ? std::optional<int>(patience) : std::nullopt;
    config.validate();
    if (print_config) {
      std::cout << debnn::config_to_json(config) << '\n';
      return 0;
    }
    const std::string chosen = app.get_subcommands().front()->get_name();
    Command command = Command::report;
    for (const auto& [name, cmd] : commands) {
      if (name == chosen) command = cmd;
    }
    const debnn::RunSummary summary = debnn::run_command(config, command);
    std::printf("%s: %d ran, %d cached, %zu failed\n", chosen.c_str(), summary.ran, summary.cached,
                summary.failed.size());
    for (const auto& [id, msg] : summary.failed) std::fprintf(stderr, "  failed %s: %s\n", id.c_str(), msg.c_str());
    return summary.failed.empty() ? 0 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
