#include "debnn/harness.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace debnn {

using nlohmann::json;
namespace fs = std::filesystem;

// --- configuration --------------------------------------------------------

namespace {

bool is_flow_method(const std::string& m, int* length = nullptr) {
  if (m.rfind("lanf-", 0) != 0) return false;
  try {
    std::size_t used = 0;
    const int t = std::stoi(m.substr(5), &used);
    if (used != m.size() - 5 || t < 1) return false;
    if (length) *length = t;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

TrainConfig default_training(const std::string& kind) {
  TrainConfig t;
  if (kind == "regression") {
    t.epochs = 200;
    t.lr = 3e-3;
    t.weight_decay = 1.0;
    t.early_stop_patience = 50;
  } else {
    t.epochs = 1000;
    t.lr = 0.05;
    t.weight_decay = 1e-3;
    t.early_stop_patience = std::nullopt;
  }
  return t;
}

ExperimentConfig::ExperimentConfig() { train = default_training(data.kind); }

ExperimentConfig default_config(const std::string& kind) {
  ExperimentConfig c;
  c.name = kind;
  c.data.kind = kind;
  c.train = default_training(kind);
  return c;
}

NetworkSpec ExperimentConfig::network() const {
  if (classification()) return NetworkSpec::classifier(hidden, 2, data.num_classes, activation);
  return NetworkSpec::regressor(hidden, 1, activation);
}

std::vector<std::string> ExperimentConfig::fitted_methods() const {
  std::vector<std::string> out = {"de", "swa", "swag", "llla"};
  if (classification()) out.push_back("llla-probit");
  for (int t : flow_lengths) out.push_back("lanf-" + std::to_string(t));
  return out;
}

void ExperimentConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (data.kind != "two_moons" && data.kind != "spirals" && data.kind != "regression") {
    fail("unknown dataset kind '" + data.kind + "'");
  }
  if (data.n < 30) fail("dataset needs at least 30 rows");
  if (classification() && data.num_classes < 2) fail("classification needs at least 2 classes");
  if (data.kind == "two_moons" && data.num_classes != 2) fail("two_moons has exactly 2 classes");
  if (!data.ood.empty() && classification() == (ood_kind_from_string(data.ood) == OodKind::out_of_range)) {
    fail("OOD set '" + data.ood + "' does not fit the task");
  }
  if (hidden.empty()) fail("at least one hidden layer is required");
  network().validate();
  train.validate();
  if (pool_size < 1) fail("pool_size must be >= 1");
  if (ks.empty()) fail("ks is empty");
  for (int k : ks) {
    if (k < 1 || k > pool_size) fail("every K must lie in [1, pool_size]");
  }
  if (n_draws < 1) fail("n_draws must be >= 1");
  if (s_select < 1 || s_test < 1) fail("sample counts must be >= 1");
  if (flow_lengths.empty()) fail("flow_lengths is empty");
  for (int t : flow_lengths) {
    if (t < 1) fail("flow lengths must be >= 1");
  }
  const auto fitted = fitted_methods();
  const auto known = [&](const std::string& m) {
    return std::find(fitted.begin(), fitted.end(), m) != fitted.end();
  };
  if (methods.empty()) fail("methods is empty");
  for (const auto& m : methods) {
    if (!known(m)) fail("unknown method '" + m + "'");
  }
  for (const auto& m : lambda_methods) {
    if (m != "swag" && m != "llla" && !is_flow_method(m)) fail("lambda sweep supports swag, llla and lanf-T");
    if (!known(m)) fail("lambda method '" + m + "' is not fitted");
  }
  const auto positive = [&](const std::vector<double>& g, const char* name) {
    if (g.empty()) fail(std::string(name) + " is empty");
    for (double v : g) {
      if (!(v > 0.0)) fail(std::string(name) + " entries must be positive");
    }
  };
  positive(prior_precision_grid, "prior_precision_grid");
  positive(swag_lr_grid, "swag_lr_grid");
  positive(flow_prior_grid, "flow_prior_grid");
  positive(lambdas, "lambdas");
  if (swag_rank < 2 || swag_epochs < swag_rank) fail("SWAG needs swag_epochs >= swag_rank >= 2");
  if (flow_epochs < 0 || flow_mc_samples < 1 || !(flow_lr > 0.0)) fail("invalid flow settings");
  if (ablate_samples.empty()) fail("ablate_samples is empty");
  for (int s : ablate_samples) {
    if (s < 1) fail("ablation sample counts must be >= 1");
  }
  if (ablate_k < 1 || ablate_k > pool_size) fail("ablate_k must lie in [1, pool_size]");
  if (ece_bins < 1) fail("ece_bins must be >= 1");
  if (workers < 1) fail("workers must be >= 1");
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["data"] = {{"kind", c.data.kind}, {"n", c.data.n},     {"noise", c.data.noise},
               {"num_classes", c.data.num_classes}, {"seed", c.data.seed}, {"ood", c.data.ood}};
  j["hidden"] = c.hidden;
  j["activation"] = to_string(c.activation);
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"lr_schedule", to_string(c.train.lr_schedule)},
                {"early_stop_patience",
                 c.train.early_stop_patience ? json(*c.train.early_stop_patience) : json(nullptr)},
                {"seed", c.train.seed}};
  j["pool_size"] = c.pool_size;
  j["ks"] = c.ks;
  j["n_draws"] = c.n_draws;
  j["s_select"] = c.s_select;
  j["s_test"] = c.s_test;
  j["methods"] = c.methods;
  j["flow_lengths"] = c.flow_lengths;
  j["prior_precision_grid"] = c.prior_precision_grid;
  j["swag_lr_grid"] = c.swag_lr_grid;
  j["flow_prior_grid"] = c.flow_prior_grid;
  j["swag_epochs"] = c.swag_epochs;
  j["swag_rank"] = c.swag_rank;
  j["flow_epochs"] = c.flow_epochs;
  j["flow_lr"] = c.flow_lr;
  j["flow_mc_samples"] = c.flow_mc_samples;
  j["ablate_samples"] = c.ablate_samples;
  j["ablate_k"] = c.ablate_k;
  j["lambdas"] = c.lambdas;
  j["lambda_methods"] = c.lambda_methods;
  j["ece_bins"] = c.ece_bins;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["work_dir"] = c.work_dir.string();
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  std::string kind = "two_moons";
  if (j.contains("data")) kind = j["data"].value("kind", kind);
  ExperimentConfig c = default_config(kind);
  c.name = j.value("name", c.name);
  if (j.contains("data")) {
    const json& d = j["data"];
    c.data.kind = d.value("kind", c.data.kind);
    c.data.n = d.value("n", c.data.n);
    c.data.noise = d.value("noise", c.data.noise);
    c.data.num_classes = d.value("num_classes", c.data.num_classes);
    c.data.seed = d.value("seed", c.data.seed);
    c.data.ood = d.value("ood", c.data.ood);
  }
  c.hidden = j.value("hidden", c.hidden);
  c.activation = activation_from_string(j.value("activation", to_string(c.activation)));
  if (j.contains("train")) {
    const json& t = j["train"];
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.momentum = t.value("momentum", c.train.momentum);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.lr_schedule = schedule_from_string(t.value("lr_schedule", to_string(c.train.lr_schedule)));
    if (t.contains("early_stop_patience")) {
      const json& p = t["early_stop_patience"];
      c.train.early_stop_patience = p.is_null() ? std::nullopt : std::optional<int>(p.get<int>());
    }
    c.train.seed = t.value("seed", c.train.seed);
  }
  c.pool_size = j.value("pool_size", c.pool_size);
  c.ks = j.value("ks", c.ks);
  c.n_draws = j.value("n_draws", c.n_draws);
  c.s_select = j.value("s_select", c.s_select);
  c.s_test = j.value("s_test", c.s_test);
  c.methods = j.value("methods", c.methods);
  c.flow_lengths = j.value("flow_lengths", c.flow_lengths);
  c.prior_precision_grid = j.value("prior_precision_grid", c.prior_precision_grid);
  c.swag_lr_grid = j.value("swag_lr_grid", c.swag_lr_grid);
  c.flow_prior_grid = j.value("flow_prior_grid", c.flow_prior_grid);
  c.swag_epochs = j.value("swag_epochs", c.swag_epochs);
  c.swag_rank = j.value("swag_rank", c.swag_rank);
  c.flow_epochs = j.value("flow_epochs", c.flow_epochs);
  c.flow_lr = j.value("flow_lr", c.flow_lr);
  c.flow_mc_samples = j.value("flow_mc_samples", c.flow_mc_samples);
  c.ablate_samples = j.value("ablate_samples", c.ablate_samples);
  c.ablate_k = j.value("ablate_k", c.ablate_k);
  c.lambdas = j.value("lambdas", c.lambdas);
  c.lambda_methods = j.value("lambda_methods", c.lambda_methods);
  c.ece_bins = j.value("ece_bins", c.ece_bins);
  c.seed = j.value("seed", c.seed);
  c.workers = j.value("workers", c.workers);
  c.work_dir = j.value("work_dir", c.work_dir.string());
  return c;
}

// --- task graph -----------------------------------------------------------

std::string cache_key(const std::string& params, const std::vector<fs::path>& inputs) {
  std::uint64_t h = fnv1a64(params);
  for (const fs::path& p : inputs) {
    h = fnv1a64("\x1finput\x1f", h);
    std::ifstream in(p, std::ios::binary);
    if (!in) {
      h = fnv1a64("<absent>", h);
      continue;
    }
    char buf[1 << 16];
    while (in) {
      in.read(buf, sizeof buf);
      h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

void RunPlan::add(Task task) {
  for (const Task& t : tasks_) {
    if (t.id == task.id) throw std::invalid_argument("duplicate task id '" + task.id + "'");
  }
  tasks_.push_back(std::move(task));
}

std::vector<std::string> RunPlan::topological_order() const {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < tasks_.size(); ++i) index[tasks_[i].id] = i;
  std::vector<int> indegree(tasks_.size(), 0);
  std::vector<std::vector<std::size_t>> children(tasks_.size());
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    for (const auto& d : tasks_[i].deps) {
      auto it = index.find(d);
      if (it == index.end()) {
        throw std::invalid_argument("task '" + tasks_[i].id + "' depends on unknown '" + d + "'");
      }
      children[it->second].push_back(i);
      ++indegree[i];
    }
  }
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (indegree[i] == 0) ready.insert(i);
  }
  std::vector<std::string> order;
  while (!ready.empty()) {
    const std::size_t i = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(tasks_[i].id);
    for (std::size_t c : children[i]) {
      if (--indegree[c] == 0) ready.insert(c);
    }
  }
  if (order.size() != tasks_.size()) throw std::invalid_argument("task graph has a cycle");
  return order;
}

namespace {

fs::path key_path(const Task& t) {
  fs::path p = t.outputs.front();
  p += ".key";
  return p;
}

bool is_cached(const Task& t, const std::string& key) {
  if (t.outputs.empty()) return false;
  for (const fs::path& p : t.outputs) {
    if (!fs::exists(p)) return false;
  }
  std::ifstream in(key_path(t));
  std::string stored;
  return in && std::getline(in, stored) && stored == key;
}

}  // namespace

RunSummary RunPlan::execute(int workers) const {
  const std::vector<std::string> order = topological_order();
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < tasks_.size(); ++i) index[tasks_[i].id] = i;
  std::vector<int> indegree(tasks_.size(), 0);
  std::vector<std::vector<std::size_t>> children(tasks_.size());
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    for (const auto& d : tasks_[i].deps) {
      children[index[d]].push_back(i);
      ++indegree[i];
    }
  }

  std::mutex mu;
  std::condition_variable cv;
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (indegree[i] == 0) ready.insert(i);
  }
  std::size_t finished = 0;
  RunSummary summary;
  std::map<std::size_t, std::string> failures;

  const auto run_one = [&](std::size_t i) {
    const Task& t = tasks_[i];
    bool cached = false;
    std::optional<std::string> error;
    try {
      const std::string key = cache_key(t.params, t.inputs);
      cached = is_cached(t, key);
      if (!cached) {
        if (!t.outputs.empty()) fs::remove(key_path(t));
        if (t.run) t.run();
        if (!t.outputs.empty()) {
          for (const fs::path& p : t.outputs) {
            if (!fs::exists(p)) throw std::runtime_error("task did not produce " + p.string());
          }
          write_text(key_path(t), key + "\n");
        }
      }
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard<std::mutex> lock(mu);
    if (error) {
      failures[i] = *error;
    } else if (cached) {
      ++summary.cached;
    } else {
      ++summary.ran;
    }
    for (std::size_t c : children[i]) {
      if (--indegree[c] == 0) ready.insert(c);
    }
    ++finished;
    cv.notify_all();
  };

  const auto worker = [&]() {
    for (;;) {
      std::size_t next = 0;
      {
        std::unique_lock<std::mutex> lock(mu);
        cv.wait(lock, [&] { return !ready.empty() || finished == tasks_.size(); });
        if (ready.empty()) return;
        next = *ready.begin();
        ready.erase(ready.begin());
      }
      run_one(next);
    }
  };

  const int n = std::max(1, std::min<int>(workers, static_cast<int>(tasks_.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& [i, msg] : failures) summary.failed.emplace_back(tasks_[i].id, msg);
  return summary;
}

// --- layout ---------------------------------------------------------------

std::string member_id(int member) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member-%02d", member);
  return buf;
}

fs::path WorkLayout::checkpoint(int member) const {
  return root / "pool" / (member_id(member) + ".ckpt");
}
fs::path WorkLayout::failure(int member) const {
  return root / "pool" / (member_id(member) + ".failed");
}
fs::path WorkLayout::posterior(const std::string& method, int member) const {
  return root / "posteriors" / method / (member_id(member) + ".post");
}
fs::path WorkLayout::store(const std::string& experiment) const {
  return root / "results" / (experiment + ".jsonl");
}
fs::path WorkLayout::table(const std::string& name) const { return reports() / (name + ".csv"); }

std::uint64_t sampling_seed(std::uint64_t master, const std::string& method, int k, int draw) {
  return derive_seed(master, "sample",
                     {fnv1a64(method), static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(draw)});
}

std::vector<EnsembleDraw> ensemble_draws(const ExperimentConfig& c, int k) {
  return draw_ensembles(c.pool_size, k, c.n_draws,
                        derive_seed(c.seed, "ensembles", {static_cast<std::uint64_t>(k)}));
}

std::string to_string(Command c) {
  switch (c) {
    case Command::data: return "data";
    case Command::train_pool: return "train-pool";
    case Command::fit_posteriors: return "fit-posteriors";
    case Command::evaluate: return "evaluate";
    case Command::ablate_samples: return "ablate-samples";
    case Command::sweep_lambda: return "sweep-lambda";
    case Command::ood: return "ood";
    case Command::stacking: return "stacking";
    case Command::rank: return "rank";
    case Command::report: return "report";
  }
  return "?";
}

Command command_from_string(const std::string& s) {
  for (Command c : {Command::data, Command::train_pool, Command::fit_posteriors, Command::evaluate,
                    Command::ablate_samples, Command::sweep_lambda, Command::ood, Command::stacking,
                    Command::rank, Command::report}) {
    if (to_string(c) == s) return c;
  }
  throw std::invalid_argument("unknown command '" + s + "'");
}

// --- derived tables -------------------------------------------------------

std::pair<double, double> mean_and_se(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return {mean, sd / std::sqrt(static_cast<double>(v.size()))};
}

namespace {

using RowKey = std::pair<std::string, int>;  // method, K

std::map<RowKey, std::map<int, const MetricsReport*>> by_method_k(
    const std::vector<MetricsReport>& rows) {
  std::map<RowKey, std::map<int, const MetricsReport*>> out;
  for (const auto& r : rows) out[{r.method, r.k}][r.draw] = &r;
  return out;
}

double de_k1_baseline(const std::vector<MetricsReport>& rows) {
  std::vector<double> base;
  for (const auto& r : rows) {
    if (r.method == "de" && r.k == 1) base.push_back(r.elpd);
  }
  if (base.empty()) throw std::runtime_error("no DE K=1 rows to use as the MAP baseline");
  return mean_and_se(base).first;
}

}  // namespace

std::vector<DeltaRow> delta_vs_map(const std::vector<MetricsReport>& rows) {
  const double b = de_k1_baseline(rows);
  std::vector<DeltaRow> out;
  for (const auto& [key, draws] : by_method_k(rows)) {
    std::vector<double> elpds;
    std::vector<double> pct;
    for (const auto& [d, r] : draws) {
      elpds.push_back(r->elpd);
      pct.push_back(100.0 * (r->elpd - b) / std::abs(b));
    }
    const double mean = 100.0 * (mean_and_se(elpds).first - b) / std::abs(b);
    out.push_back(DeltaRow{key.first, key.second, mean, 2.0 * mean_and_se(pct).second,
                           static_cast<int>(pct.size())});
  }
  return out;
}

std::vector<DeltaRow> delta_vs_de(const std::vector<MetricsReport>& rows) {
  const auto grouped = by_method_k(rows);
  std::vector<DeltaRow> out;
  for (const auto& [key, draws] : grouped) {
    const auto de = grouped.find({"de", key.second});
    if (de == grouped.end()) continue;
    std::vector<double> pct;
    for (const auto& [d, r] : draws) {
      const auto ref = de->second.find(d);
      if (ref == de->second.end()) continue;
      pct.push_back(100.0 * (r->elpd - ref->second->elpd) / std::abs(ref->second->elpd));
    }
    if (pct.empty()) continue;
    const auto [mean, se] = mean_and_se(pct);
    out.push_back(DeltaRow{key.first, key.second, mean, 2.0 * se, static_cast<int>(pct.size())});
  }
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& values, bool lower_is_better) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return lower_is_better ? values[a] < values[b] : values[a] > values[b];
  });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && values[idx[j]] == values[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[idx[t]] = avg;
    i = j;
  }
  return ranks;
}

std::vector<RankRow> rank_methods(const std::vector<MetricsReport>& rows,
                                  const std::vector<std::string>& methods, int* skipped) {
  // (K, draw) -> method -> row
  std::map<std::pair<int, int>, std::map<std::string, const MetricsReport*>> cells;
  for (const auto& r : rows) cells[{r.k, r.draw}][r.method] = &r;
  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::map<std::tuple<std::string, int, std::string>, Acc> acc;
  int missing = 0;
  for (const auto& [kd, by_method] : cells) {
    std::vector<const MetricsReport*> present;
    for (const auto& m : methods) {
      auto it = by_method.find(m);
      if (it == by_method.end()) break;
      present.push_back(it->second);
    }
    if (present.size() != methods.size()) {
      ++missing;
      continue;
    }
    std::vector<std::pair<std::string, bool>> metrics;  // name, lower is better
    if (present.front()->accuracy) metrics.emplace_back("accuracy", false);
    if (present.front()->n_mae) metrics.emplace_back("n_mae", false);
    metrics.emplace_back("elpd", false);
    if (present.front()->ece) metrics.emplace_back("ece", true);
    for (const auto& [metric, lower] : metrics) {
      std::vector<double> values;
      for (const auto* r : present) {
        if (metric == "accuracy") values.push_back(*r->accuracy);
        else if (metric == "n_mae") values.push_back(*r->n_mae);
        else if (metric == "ece") values.push_back(*r->ece);
        else values.push_back(r->elpd);
      }
      const auto ranks = average_ranks(values, lower);
      for (std::size_t i = 0; i < methods.size(); ++i) {
        auto& a = acc[{methods[i], kd.first, metric}];
        a.sum += ranks[i];
        ++a.n;
      }
    }
  }
  if (skipped) *skipped = missing;
  std::vector<RankRow> out;
  for (const auto& m : methods) {
    for (const auto& [key, a] : acc) {
      if (std::get<0>(key) != m) continue;
      out.push_back(RankRow{m, std::get<1>(key), std::get<2>(key), a.sum / a.n, a.n});
    }
  }
  return out;
}

// --- stages ---------------------------------------------------------------

namespace {

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }
  void save(const fs::path& path) const { write_text(path, out_.str()); }

 private:
  std::ostringstream out_;
};

std::string num(double v) { return format_number(v); }

OodKind default_ood(const ExperimentConfig& c) {
  if (!c.data.ood.empty()) return ood_kind_from_string(c.data.ood);
  return c.classification() ? OodKind::shifted_blobs : OodKind::out_of_range;
}

Dataset generate_dataset(const DataConfig& d) {
  if (d.kind == "regression") return make_regression(d.n, d.seed);
  const auto kind = d.kind == "two_moons" ? ClassificationKind::two_moons : ClassificationKind::spirals;
  return make_classification(kind, d.n, d.noise, d.seed, d.num_classes);
}

using Pool = std::vector<std::shared_ptr<const PosteriorHandle>>;  // null for missing members

struct Flag {
  std::string experiment;
  std::string method;
  int k;
  int draw;
  std::string reason;
};

class Pipeline {
 public:
  explicit Pipeline(const ExperimentConfig& c) : c_(c), layout_{c.work_dir}, spec_(c.network()) {}

  const WorkLayout& layout() const { return layout_; }

  // -- data / train / fit --

  void make_data() const {
    const Dataset d = generate_dataset(c_.data);
    save(layout_.dataset(), d);
    save(layout_.ood(), make_ood(d, default_ood(c_), derive_seed(c_.data.seed, "ood")));
  }

  void train_member(int i) const {
    const Dataset data = load<Dataset>(layout_.dataset());
    TrainConfig tc = c_.train;
    tc.seed = derive_seed(c_.seed, "member", {static_cast<std::uint64_t>(i)});
    try {
      TrainResult r = train_map(spec_, data, tc);
      save(layout_.checkpoint(i), Checkpoint{member_id(i), spec_, std::move(r.theta), tc,
                                             std::move(r.trace), r.best_epoch});
      fs::remove(layout_.failure(i));
    } catch (const std::exception& e) {
      write_text(layout_.failure(i), std::string(e.what()) + "\n");
      throw;
    }
  }

  void fit_group(const std::string& group, int i) const {
    if (!fs::exists(layout_.checkpoint(i))) {
      throw std::runtime_error("no checkpoint for " + member_id(i));
    }
    const Dataset data = load<Dataset>(layout_.dataset());
    const Checkpoint ckpt = load<Checkpoint>(layout_.checkpoint(i));
    const auto member = static_cast<std::uint64_t>(i);
    const auto handle = [&](std::string method, Posterior post, std::optional<TuningRecord> t) {
      return PosteriorHandle{spec_, std::move(post), ckpt.id, std::move(method), std::move(t)};
    };
    if (group == "de") {
      save(layout_.posterior("de", i), handle("de", PointMassPosterior{ckpt.theta}, std::nullopt));
    } else if (group == "llla") {
      const auto seed = derive_seed(c_.seed, "tune-llla", {member});
      PriorTuneResult mc = tune_prior_precision(spec_, ckpt.theta, data, c_.prior_precision_grid,
                                                c_.s_select, seed);
      save(layout_.posterior("llla", i),
           handle("llla", mc.posterior,
                  TuningRecord{"prior_precision", mc.prior_precision, mc.val_elpd, mc.table}));
      if (c_.classification()) {
        PriorTuneResult pr = tune_prior_precision(spec_, ckpt.theta, data, c_.prior_precision_grid,
                                                  c_.s_select, seed, HessianMode::full,
                                                  SelectionCriterion::probit);
        save(layout_.posterior("llla-probit", i),
             handle("llla-probit", pr.posterior,
                    TuningRecord{"prior_precision", pr.prior_precision, pr.val_elpd, pr.table}));
      }
    } else if (group == "swag") {
      TrainConfig tc = ckpt.config;
      tc.seed = derive_seed(c_.seed, "swag", {member});
      SwagTuneResult r = tune_swag_lr(spec_, ckpt.theta, data, c_.swag_lr_grid, c_.swag_epochs,
                                      c_.swag_rank, c_.s_select, tc,
                                      derive_seed(c_.seed, "tune-swag", {member}));
      const auto value = [&](double lr, int col) {
        for (const auto& row : r.table.rows) {
          if (row[0] == lr) return row[static_cast<std::size_t>(col)];
        }
        return std::numeric_limits<double>::quiet_NaN();
      };
      save(layout_.posterior("swag", i),
           handle("swag", r.swag, TuningRecord{"lr", r.lr_swag, value(r.lr_swag, 1), r.table}));
      save(layout_.posterior("swa", i),
           handle("swa", r.swa, TuningRecord{"lr", r.lr_swa, value(r.lr_swa, 2), r.table}));
    } else {
      int t = 0;
      if (!is_flow_method(group, &t)) throw std::invalid_argument("unknown fit group " + group);
      FlowFitOptions opts;
      opts.num_flows = t;
      opts.epochs = c_.flow_epochs;
      opts.lr = c_.flow_lr;
      opts.mc_samples = c_.flow_mc_samples;
      opts.batch_size = c_.train.batch_size;
      opts.val_samples = c_.s_select;
      opts.seed = derive_seed(c_.seed, "flow", {member, static_cast<std::uint64_t>(t)});
      FlowTuneResult r = tune_flow(spec_, ckpt.theta, data, c_.flow_prior_grid, opts);
      save(layout_.posterior(group, i),
           handle(group, r.posterior,
                  TuningRecord{"prior_precision", r.prior_precision, r.val_elpd, r.table}));
    }
  }

  // -- experiments --

  Pool load_pool(const std::string& method) const {
    Pool pool(static_cast<std::size_t>(c_.pool_size));
    for (int i = 0; i < c_.pool_size; ++i) {
      const fs::path p = layout_.posterior(method, i);
      if (fs::exists(p)) pool[static_cast<std::size_t>(i)] = std::make_shared<const PosteriorHandle>(load<PosteriorHandle>(p));
    }
    return pool;
  }

  static Pool scaled(const Pool& pool, double lambda) {
    if (lambda == 1.0) return pool;
    Pool out;
    for (const auto& h : pool) {
      if (!h) {
        out.push_back(nullptr);
        continue;
      }
      PosteriorHandle copy = *h;
      copy.posterior = scale_covariance(h->posterior, lambda);
      out.push_back(std::make_shared<const PosteriorHandle>(std::move(copy)));
    }
    return out;
  }

  std::optional<MixturePosterior> mixture(const Pool& pool, const EnsembleDraw& draw,
                                          std::optional<std::vector<double>> weights = std::nullopt) const {
    std::vector<std::shared_ptr<const PosteriorHandle>> members;
    for (int id : draw.members) {
      const auto& h = pool[static_cast<std::size_t>(id)];
      if (!h) return std::nullopt;
      members.push_back(h);
    }
    return build_mixture(std::move(members), std::move(weights));
  }

  MetricsReport report(const PredictiveResult& pred, const Eigen::VectorXd& y,
                       const std::string& experiment, const std::string& method, int k, int draw,
                       std::uint64_t seed, const std::string& scheme, double lambda) const {
    MetricsReport r = evaluate_predictive(pred, y, c_.ece_bins);
    r.experiment = experiment;
    r.method = method;
    r.k = k;
    r.draw = draw;
    r.seed = seed;
    r.sampling = scheme;
    r.lambda = lambda;
    return r;
  }

  void write_store(const std::string& experiment, const std::vector<MetricsReport>& rows,
                   const std::vector<Flag>& flags) const {
    const fs::path path = layout_.store(experiment);
    fs::remove(path);
    ResultStore store(path);
    for (const auto& r : rows) store.append(r);
    Csv skipped({"experiment", "method", "k", "draw", "reason"});
    for (const auto& f : flags) {
      skipped.row({f.experiment, f.method, std::to_string(f.k), std::to_string(f.draw), f.reason});
    }
    fs::path flag_path = path;
    flag_path.replace_extension(".skipped.csv");
    skipped.save(flag_path);
  }

  void evaluate() const {
    const Dataset data = load<Dataset>(layout_.dataset());
    const Batch test = data.test();
    std::vector<MetricsReport> rows;
    std::vector<Flag> flags;
    for (const auto& method : c_.methods) {
      const Pool pool = load_pool(method);
      for (int k : c_.ks) {
        const auto draws = ensemble_draws(c_, k);
        for (int d = 0; d < static_cast<int>(draws.size()); ++d) {
          const auto mix = mixture(pool, draws[static_cast<std::size_t>(d)]);
          if (!mix) {
            flags.push_back({"evaluate", method, k, d, "missing posterior"});
            continue;
          }
          const auto seed = sampling_seed(c_.seed, method, k, d);
          const SampleBatch batch = stratified_sample(*mix, c_.s_test, seed);
          rows.push_back(report(predictive(spec_, batch, test), test.y, "evaluate", method, k, d,
                                seed, "stratified", 1.0));
        }
      }
    }
    write_store("evaluate", rows, flags);

    if (c_.classification()) {
      std::vector<MetricsReport> probit_rows;
      std::vector<Flag> probit_flags;
      for (const auto& [method, cv] : {std::pair<std::string, std::string>{"llla", "mc"},
                                       std::pair<std::string, std::string>{"llla-probit", "probit"}}) {
        const Pool pool = load_pool(method);
        std::vector<std::optional<Eigen::MatrixXd>> member_probs(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) {
          if (pool[i]) {
            member_probs[i] =
                probit_predictive(spec_, std::get<LllaPosterior>(pool[i]->posterior), test.x);
          }
        }
        const std::string experiment = "probit:cv=" + cv;
        for (int k : c_.ks) {
          const auto draws = ensemble_draws(c_, k);
          for (int d = 0; d < static_cast<int>(draws.size()); ++d) {
            Eigen::MatrixXd probs = Eigen::MatrixXd::Zero(test.size(), spec_.output_width());
            bool complete = true;
            for (int id : draws[static_cast<std::size_t>(d)].members) {
              if (!member_probs[static_cast<std::size_t>(id)]) {
                complete = false;
                break;
              }
              probs += *member_probs[static_cast<std::size_t>(id)] / static_cast<double>(k);
            }
            if (!complete) {
              probit_flags.push_back({experiment, method, k, d, "missing posterior"});
              continue;
            }
            MetricsReport r = report(predictive_from_probs(std::move(probs), test.y), test.y,
                                     experiment, method, k, d, sampling_seed(c_.seed, method, k, d), "probit", 1.0);
            r.samples = 0;
            probit_rows.push_back(std::move(r));
          }
        }
      }
      write_store("probit", probit_rows, probit_flags);
    }
  }

  void ablate_samples() const {
    const Dataset data = load<Dataset>(layout_.dataset());
    const Batch test = data.test();
    std::vector<MetricsReport> rows;
    std::vector<Flag> flags;
    const int k = c_.ablate_k;
    const auto draws = ensemble_draws(c_, k);
    for (const auto& method : c_.methods) {
      const Pool pool = load_pool(method);
      for (int s : c_.ablate_samples) {
        for (const std::string scheme : {"stratified", "iid"}) {
          const std::string experiment =
              "ablate_samples:S=" + std::to_string(s) + ":" + scheme;
          for (int d = 0; d < static_cast<int>(draws.size()); ++d) {
            const auto mix = mixture(pool, draws[static_cast<std::size_t>(d)]);
            if (!mix) {
              flags.push_back({experiment, method, k, d, "missing posterior"});
              continue;
            }
            const auto seed = sampling_seed(c_.seed, method, k, d);
            const SampleBatch batch = scheme == std::string("stratified")
                                          ? stratified_sample(*mix, s, seed)
                                          : iid_sample(*mix, s, seed);
            rows.push_back(report(predictive(spec_, batch, test), test.y, experiment, method, k, d,
                                  seed, scheme, 1.0));
          }
        }
      }
    }
    write_store("ablate_samples", rows, flags);
  }

  void sweep_lambda() const {
    const Dataset data = load<Dataset>(layout_.dataset());
    const Batch test = data.test();
    std::vector<MetricsReport> rows;
    std::vector<Flag> flags;
    for (const auto& method : c_.lambda_methods) {
      const Pool base = load_pool(method);
      for (double lambda : c_.lambdas) {
        const Pool pool = scaled(base, lambda);
        const std::string experiment = "sweep_lambda:lambda=" + format_number(lambda);
        for (int k : c_.ks) {
          const auto draws = ensemble_draws(c_, k);
          for (int d = 0; d < static_cast<int>(draws.size()); ++d) {
            const auto mix = mixture(pool, draws[static_cast<std::size_t>(d)]);
            if (!mix) {
              flags.push_back({experiment, method, k, d, "missing posterior"});
              continue;
            }
            const auto seed = sampling_seed(c_.seed, method, k, d);
            const SampleBatch batch = stratified_sample(*mix, c_.s_test, seed);
            rows.push_back(report(predictive(spec_, batch, test), test.y, experiment, method, k,
                                  d, seed, "stratified", lambda));
          }
        }
      }
    }
    write_store("sweep_lambda", rows, flags);
  }

  void ood() const {
    const Dataset data = load<Dataset>(layout_.dataset());
    const OodPair pair = load<OodPair>(layout_.ood());
    const Batch test = data.test();
    std::vector<MetricsReport> rows;
    std::vector<Flag> flags;
    for (const auto& method : c_.methods) {
      const Pool pool = load_pool(method);
      for (int k : c_.ks) {
        const auto draws = ensemble_draws(c_, k);
        for (int d = 0; d < static_cast<int>(draws.size()); ++d) {
          const auto mix = mixture(pool, draws[static_cast<std::size_t>(d)]);
          if (!mix) {
            flags.push_back({"ood", method, k, d, "missing posterior"});
            continue;
          }
          const auto seed = sampling_seed(c_.seed, method, k, d);
          const SampleBatch batch = stratified_sample(*mix, c_.s_test, seed);
          const PredictiveResult id_pred = predictive(spec_, batch, test);
          const PredictiveResult ood_pred = predictive(spec_, batch, pair.inputs);
          MetricsReport r = report(id_pred, test.y, "ood", method, k, d, seed, "stratified", 1.0);
          const Eigen::VectorXd id_scores = ood_score(id_pred);
          const Eigen::VectorXd ood_scores = ood_score(ood_pred);
          r.auroc = auroc(std::span(id_scores.data(), static_cast<std::size_t>(id_scores.size())),
                          std::span(ood_scores.data(), static_cast<std::size_t>(ood_scores.size())));
          rows.push_back(std::move(r));
        }
      }
    }
    write_store("ood", rows, flags);
  }

  void stacking() const {
    const Dataset data = load<Dataset>(layout_.dataset());
    const Batch val = data.val();
    const Batch test = data.test();
    Csv csv({"method", "k", "draw", "normalized_entropy", "uniform_elpd", "stacked_elpd",
             "delta_elpd", "iterations", "converged"});
    for (const auto& method : c_.methods) {
      const Pool pool = load_pool(method);
      // Each member's own S_select-sample predictive density on the validation split.
      std::vector<std::optional<Eigen::VectorXd>> member_ld(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!pool[i]) continue;
        const MixturePosterior single = build_mixture({pool[i]});
        const auto seed = derive_seed(c_.seed, "stack-member", {fnv1a64(method), i});
        const SampleBatch batch = stratified_sample(single, c_.s_select, seed);
        member_ld[i] = *predictive(spec_, batch, val).log_density;
      }
      for (int k : c_.ks) {
        if (k < 2) continue;
        const auto draws = ensemble_draws(c_, k);
        for (int d = 0; d < static_cast<int>(draws.size()); ++d) {
          const EnsembleDraw& draw = draws[static_cast<std::size_t>(d)];
          Eigen::MatrixXd l(val.size(), k);
          bool complete = true;
          for (int j = 0; j < k; ++j) {
            const auto& ld = member_ld[static_cast<std::size_t>(draw.members[static_cast<std::size_t>(j)])];
            if (!ld) {
              complete = false;
              break;
            }
            l.col(j) = *ld;
          }
          if (!complete) continue;
          const StackingResult st = stack_weights(l);
          const auto seed = sampling_seed(c_.seed, method, k, d);
          const auto uniform = mixture(pool, draw);
          // Stacked weights can sit a rounding error off the simplex sum.
          std::vector<double> w = st.weights;
          double total = 0.0;
          for (double v : w) total += v;
          for (double& v : w) v /= total;
          const auto stacked = mixture(pool, draw, w);
          const double u = elpd(predictive(spec_, stratified_sample(*uniform, c_.s_test, seed), test));
          const double s = elpd(predictive(spec_, stratified_sample(*stacked, c_.s_test, seed), test));
          csv.row({method, std::to_string(k), std::to_string(d), num(normalized_entropy(st.weights)),
                   num(u), num(s), num(s - u), std::to_string(st.iterations),
                   st.converged ? "1" : "0"});
        }
      }
    }
    csv.save(layout_.table("stacking"));
  }

  // -- tables --

  std::vector<MetricsReport> read_store(const std::string& experiment) const {
    return ResultStore(layout_.store(experiment)).read();
  }

  void rank() const {
    const auto rows = read_store("evaluate");
    int skipped = 0;
    Csv csv({"method", "k", "metric", "mean_rank", "n_draws"});
    for (const auto& r : rank_methods(rows, c_.methods, &skipped)) {
      csv.row({r.method, std::to_string(r.k), r.metric, num(r.mean_rank), std::to_string(r.n_draws)});
    }
    csv.save(layout_.table("table1_ranks"));
    write_text(layout_.reports() / "table1_ranks.skipped.txt",
               std::to_string(skipped) + " (K, draw) cells excluded for missing methods\n");
  }

  void report_all() const {
    const auto eval = read_store("evaluate");
    write_text(layout_.table("results_evaluate"), reports_to_csv(eval));

    // Fig. 1
    const auto delta_table = [&](const std::vector<DeltaRow>& d, const std::string& name) {
      Csv csv({"method", "k", "pct_delta_elpd", "two_se", "n_draws"});
      for (const auto& r : d) {
        csv.row({r.method, std::to_string(r.k), num(r.mean), num(r.two_se), std::to_string(r.n_draws)});
      }
      csv.save(layout_.table(name));
    };
    delta_table(delta_vs_map(eval), "fig1_delta_vs_map");
    delta_table(delta_vs_de(eval), "fig1_delta_vs_de");
    const double baseline = de_k1_baseline(eval);

    // Fig. 2
    {
      const auto rows = read_store("ablate_samples");
      std::map<std::tuple<std::string, int, std::string>, std::map<int, double>> cells;
      for (const auto& r : rows) cells[{r.method, r.samples, r.sampling}][r.draw] = r.elpd;
      Csv curve({"method", "samples", "sampling", "mean_elpd", "two_se", "pct_delta_vs_map", "n_draws"});
      Csv diff({"method", "samples", "pct_stratified_minus_iid", "two_se", "n_draws"});
      for (const auto& [key, draws] : cells) {
        std::vector<double> v;
        for (const auto& [d, e] : draws) v.push_back(e);
        const auto [mean, se] = mean_and_se(v);
        curve.row({std::get<0>(key), std::to_string(std::get<1>(key)), std::get<2>(key), num(mean),
                   num(2 * se), num(100.0 * (mean - baseline) / std::abs(baseline)),
                   std::to_string(v.size())});
        if (std::get<2>(key) != "stratified") continue;
        const auto iid = cells.find({std::get<0>(key), std::get<1>(key), "iid"});
        if (iid == cells.end()) continue;
        std::vector<double> pct;
        for (const auto& [d, e] : draws) {
          auto it = iid->second.find(d);
          if (it != iid->second.end()) pct.push_back(100.0 * (e - it->second) / std::abs(baseline));
        }
        const auto [dm, dse] = mean_and_se(pct);
        diff.row({std::get<0>(key), std::to_string(std::get<1>(key)), num(dm), num(2 * dse),
                  std::to_string(pct.size())});
      }
      curve.save(layout_.table("fig2_samples"));
      diff.save(layout_.table("fig2_stratified_minus_iid"));
    }

    // Fig. 3
    {
      const auto rows = read_store("sweep_lambda");
      std::map<int, double> de_ref;
      {
        std::map<int, std::vector<double>> de;
        for (const auto& r : eval) {
          if (r.method == "de") de[r.k].push_back(r.elpd);
        }
        for (const auto& [k, v] : de) de_ref[k] = mean_and_se(v).first;
      }
      std::map<std::tuple<std::string, int, double>, std::vector<double>> cells;
      for (const auto& r : rows) cells[{r.method, r.k, r.lambda}].push_back(r.elpd);
      Csv csv({"method", "k", "lambda", "mean_elpd", "two_se", "de_mean_elpd", "n_draws"});
      for (const auto& [key, v] : cells) {
        const auto [mean, se] = mean_and_se(v);
        const auto ref = de_ref.find(std::get<1>(key));
        csv.row({std::get<0>(key), std::to_string(std::get<1>(key)), num(std::get<2>(key)), num(mean),
                 num(2 * se), ref == de_ref.end() ? "" : num(ref->second), std::to_string(v.size())});
      }
      csv.save(layout_.table("fig3_lambda"));
    }

    // Fig. 4
    {
      Csv csv({"method", "k", "draw", "elpd", "auroc", "is_de"});
      for (const auto& r : read_store("ood")) {
        csv.row({r.method, std::to_string(r.k), std::to_string(r.draw), num(r.elpd),
                 r.auroc ? num(*r.auroc) : "", r.method == "de" ? "1" : "0"});
      }
      csv.save(layout_.table("fig4_ood"));
    }

    rank();

    // Table D.2
    if (c_.classification()) {
      const auto probit = read_store("probit");
      Csv csv({"k", "cv", "test", "accuracy", "elpd", "ece", "n_draws"});
      const auto summarize = [&](const std::vector<const MetricsReport*>& rs, int k,
                                 const char* cv, const char* test) {
        std::vector<double> acc, el, ec;
        for (const auto* r : rs) {
          acc.push_back(*r->accuracy);
          el.push_back(r->elpd);
          ec.push_back(*r->ece);
        }
        if (rs.empty()) return;
        csv.row({std::to_string(k), cv, test, num(mean_and_se(acc).first), num(mean_and_se(el).first),
                 num(mean_and_se(ec).first), std::to_string(rs.size())});
      };
      for (int k : c_.ks) {
        std::vector<const MetricsReport*> mcmc, mcpr, prpr;
        for (const auto& r : eval) {
          if (r.method == "llla" && r.k == k) mcmc.push_back(&r);
        }
        for (const auto& r : probit) {
          if (r.k != k) continue;
          if (r.experiment == "probit:cv=mc") mcpr.push_back(&r);
          if (r.experiment == "probit:cv=probit") prpr.push_back(&r);
        }
        summarize(mcmc, k, "MC", "MC");
        summarize(mcpr, k, "MC", "Probit");
        summarize(prpr, k, "Probit", "Probit");
      }
      csv.save(layout_.table("tableD2_probit"));
    }

    // Per-method tuning choices.
    {
      Csv csv({"method", "member", "parameter", "value", "val_elpd"});
      for (const auto& method : c_.fitted_methods()) {
        for (int i = 0; i < c_.pool_size; ++i) {
          const fs::path p = layout_.posterior(method, i);
          if (!fs::exists(p)) continue;
          const auto h = load<PosteriorHandle>(p);
          if (!h.tuning) continue;
          csv.row({method, member_id(i), h.tuning->parameter, num(h.tuning->value),
                   num(h.tuning->val_elpd)});
        }
      }
      csv.save(layout_.table("tuning"));
    }
  }

 private:
  const ExperimentConfig& c_;
  WorkLayout layout_;
  NetworkSpec spec_;
};

// Cache-key parameters: the config fields each stage reads.
std::string stage_params(const ExperimentConfig& c, const std::string& stage,
                         const std::string& extra = "") {
  json j = json::parse(config_to_json(c));
  j.erase("workers");
  j.erase("work_dir");
  j.erase("name");
  // Upstream settings reach later stages through the hashed input files, so
  // early stages key only on what they read.
  static const std::map<std::string, std::vector<std::string>> kStageKeys = {
      {"data", {"data", "seed"}},
      {"train", {"data", "hidden", "activation", "train", "seed"}},
      {"fit",
       {"data", "hidden", "activation", "train", "seed", "s_select", "prior_precision_grid",
        "swag_lr_grid", "flow_prior_grid", "swag_epochs", "swag_rank", "flow_epochs", "flow_lr",
        "flow_mc_samples"}},
  };
  if (const auto it = kStageKeys.find(stage); it != kStageKeys.end()) {
    json kept;
    for (const auto& key : it->second) kept[key] = j.at(key);
    j = std::move(kept);
  }
  j["stage"] = stage;
  j["extra"] = extra;
  j["format"] = kFileFormatVersion;
  return j.dump();
}

std::vector<std::string> fit_groups(const ExperimentConfig& c) {
  std::vector<std::string> g = {"de", "llla", "swag"};
  for (int t : c.flow_lengths) g.push_back("lanf-" + std::to_string(t));
  return g;
}

std::vector<std::string> group_methods(const ExperimentConfig& c, const std::string& group) {
  if (group == "llla" && c.classification()) return {"llla", "llla-probit"};
  if (group == "swag") return {"swag", "swa"};
  return {group};
}

}  // namespace

void plan_command(const ExperimentConfig& c, Command command, bool with_upstream, RunPlan& plan) {
  c.validate();
  // Share one Pipeline between the tasks; it only reads the config.
  auto pipe = std::make_shared<Pipeline>(c);
  const WorkLayout& L = pipe->layout();

  const auto wants = [&](Command stage) {
    if (stage == command) return true;
    if (!with_upstream) return false;
    switch (command) {
      case Command::data: return false;
      case Command::train_pool: return stage == Command::data;
      case Command::fit_posteriors:
        return stage == Command::data || stage == Command::train_pool;
      case Command::rank:
        return stage == Command::data || stage == Command::train_pool ||
               stage == Command::fit_posteriors || stage == Command::evaluate;
      case Command::report: return true;
      default:
        return stage == Command::data || stage == Command::train_pool ||
               stage == Command::fit_posteriors;
    }
  };
  const auto has = [&](const std::string& id) {
    for (const Task& t : plan.tasks()) {
      if (t.id == id) return true;
    }
    return false;
  };
  const auto deps_present = [&](std::vector<std::string> deps) {
    deps.erase(std::remove_if(deps.begin(), deps.end(), [&](const std::string& d) { return !has(d); }),
               deps.end());
    return deps;
  };

  if (wants(Command::data) && !has("data")) {
    plan.add(Task{"data", {}, stage_params(c, "data"), {}, {L.dataset(), L.ood()},
                  [pipe] { pipe->make_data(); }});
  }
  if (wants(Command::train_pool)) {
    for (int i = 0; i < c.pool_size; ++i) {
      const std::string id = "train/" + member_id(i);
      if (has(id)) continue;
      plan.add(Task{id, deps_present({"data"}), stage_params(c, "train", std::to_string(i)),
                    {L.dataset()}, {L.checkpoint(i)}, [pipe, i] { pipe->train_member(i); }});
    }
  }
  std::vector<std::string> fit_ids;
  if (wants(Command::fit_posteriors)) {
    for (const auto& group : fit_groups(c)) {
      for (int i = 0; i < c.pool_size; ++i) {
        const std::string id = "fit/" + group + "/" + member_id(i);
        fit_ids.push_back(id);
        if (has(id)) continue;
        std::vector<fs::path> outputs;
        for (const auto& m : group_methods(c, group)) outputs.push_back(L.posterior(m, i));
        plan.add(Task{id, deps_present({"train/" + member_id(i)}),
                      stage_params(c, "fit", group + "/" + std::to_string(i)),
                      {L.dataset(), L.checkpoint(i)}, outputs,
                      [pipe, group, i] { pipe->fit_group(group, i); }});
      }
    }
  }

  std::vector<fs::path> posterior_files;
  for (const auto& m : c.fitted_methods()) {
    for (int i = 0; i < c.pool_size; ++i) posterior_files.push_back(L.posterior(m, i));
  }
  std::vector<fs::path> exp_inputs = {L.dataset(), L.ood()};
  exp_inputs.insert(exp_inputs.end(), posterior_files.begin(), posterior_files.end());
  std::vector<std::string> fit_deps;
  for (const Task& t : plan.tasks()) {
    if (t.id.rfind("fit/", 0) == 0) fit_deps.push_back(t.id);
  }

  struct Exp {
    Command cmd;
    const char* id;
    std::vector<fs::path> outputs;
    std::function<void()> run;
  };
  std::vector<fs::path> eval_outputs = {L.store("evaluate")};
  if (c.classification()) eval_outputs.push_back(L.store("probit"));
  const std::vector<Exp> experiments = {
      {Command::evaluate, "evaluate", eval_outputs, [pipe] { pipe->evaluate(); }},
      {Command::ablate_samples, "ablate_samples", {L.store("ablate_samples")},
       [pipe] { pipe->ablate_samples(); }},
      {Command::sweep_lambda, "sweep_lambda", {L.store("sweep_lambda")},
       [pipe] { pipe->sweep_lambda(); }},
      {Command::ood, "ood", {L.store("ood")}, [pipe] { pipe->ood(); }},
      {Command::stacking, "stacking", {L.table("stacking")}, [pipe] { pipe->stacking(); }},
  };
  for (const auto& e : experiments) {
    const std::string id = std::string("exp/") + e.id;
    if (!wants(e.cmd) || has(id)) continue;
    plan.add(Task{id, fit_deps, stage_params(c, e.id), exp_inputs, e.outputs, e.run});
  }
  if (wants(Command::rank) && !has("rank")) {
    plan.add(Task{"rank", deps_present({"exp/evaluate"}), stage_params(c, "rank"),
                  {L.store("evaluate")}, {L.table("table1_ranks")}, [pipe] { pipe->rank(); }});
  }
  if (wants(Command::report) && !has("report")) {
    std::vector<fs::path> inputs = {L.store("evaluate"), L.store("ablate_samples"),
                                    L.store("sweep_lambda"), L.store("ood")};
    if (c.classification()) inputs.push_back(L.store("probit"));
    inputs.insert(inputs.end(), posterior_files.begin(), posterior_files.end());
    plan.add(Task{"report",
                  deps_present({"exp/evaluate", "exp/ablate_samples", "exp/sweep_lambda", "exp/ood",
                                "exp/stacking", "rank"}),
                  stage_params(c, "report"), inputs, {L.table("fig1_delta_vs_map")},
                  [pipe] { pipe->report_all(); }});
  }
}

RunSummary run_command(const ExperimentConfig& c, Command command) {
  RunPlan plan;
  plan_command(c, command, true, plan);
  fs::create_directories(c.work_dir);
  write_text(c.work_dir / "config.json", config_to_json(c) + "\n");
  return plan.execute(c.workers);
}

RunSummary run_pipeline(const ExperimentConfig& c) { return run_command(c, Command::report); }

}  // namespace debnn
