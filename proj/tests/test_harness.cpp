#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "debnn/harness.hpp"

namespace debnn {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("debnn_test_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void touch(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

// --- configuration ----------------------------------------------------------

TEST(Config, DefaultsAreValid) {
  for (const char* kind : {"two_moons", "regression", "spirals"}) {
    ExperimentConfig c = default_config(kind);
    if (std::string(kind) == "spirals") c.data.num_classes = 3;
    EXPECT_NO_THROW(c.validate()) << kind;
    EXPECT_EQ(c.pool_size, 30);
    EXPECT_EQ(c.ks, (std::vector<int>{1, 2, 5, 10, 20}));
    EXPECT_EQ(c.s_select, 100);
    EXPECT_EQ(c.s_test, 200);
    EXPECT_EQ(c.flow_lengths, (std::vector<int>{1, 5, 10, 30}));
    EXPECT_EQ(c.prior_precision_grid.size(), 21u);
    EXPECT_EQ(c.swag_lr_grid.size(), 21u);
  }
  EXPECT_EQ(ExperimentConfig().train, default_training("two_moons"));
}

TEST(Config, ValidateRejectsInconsistentSettings) {
  const auto broken = [](auto&& edit) {
    ExperimentConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(broken([](auto& c) { c.ks = {1, 31}; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.s_test = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.methods = {"de", "mystery"}; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.methods = {"lanf-7"}; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.data.kind = "cifar"; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.prior_precision_grid = {1.0, -1.0}; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.lambda_methods = {"de"}; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.swag_rank = 30; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.data.ood = "out_of_range"; }).validate(), std::invalid_argument);
  EXPECT_NO_THROW(broken([](auto& c) { c.methods = {"lanf-30", "llla-probit"}; }).validate());
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = default_config("regression");
  c.ks = {1, 3};
  c.lambdas = {0.1, 0.7};
  c.train.early_stop_patience = std::nullopt;
  c.seed = 0xabcdef0123456789ULL;
  c.work_dir = "/tmp/somewhere";
  const std::string text = config_to_json(c);
  const ExperimentConfig back = config_from_json(text);
  EXPECT_EQ(config_to_json(back), text);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_FALSE(back.train.early_stop_patience.has_value());
}

TEST(Config, MissingKeysTakeTheTaskDefaults) {
  const ExperimentConfig c = config_from_json(R"({"data": {"kind": "regression"}, "pool_size": 4})");
  EXPECT_EQ(c.pool_size, 4);
  EXPECT_EQ(c.train, default_training("regression"));
  EXPECT_FALSE(c.classification());
  const ExperimentConfig d = config_from_json("{}");
  EXPECT_EQ(config_to_json(d), config_to_json(ExperimentConfig{}));
}

TEST(Config, FittedMethodsDependOnTheTask) {
  ExperimentConfig c;
  c.flow_lengths = {2, 3};
  EXPECT_EQ(c.fitted_methods(),
            (std::vector<std::string>{"de", "swa", "swag", "llla", "llla-probit", "lanf-2", "lanf-3"}));
  c.data.kind = "regression";
  EXPECT_EQ(c.fitted_methods(), (std::vector<std::string>{"de", "swa", "swag", "llla", "lanf-2", "lanf-3"}));
}

// --- task graph -------------------------------------------------------------

TEST(RunPlan, TopologicalOrderRespectsDependencies) {
  RunPlan plan;
  plan.add(Task{"c", {"a", "b"}, "", {}, {}, [] {}});
  plan.add(Task{"a", {}, "", {}, {}, [] {}});
  plan.add(Task{"b", {"a"}, "", {}, {}, [] {}});
  plan.add(Task{"d", {}, "", {}, {}, [] {}});
  const auto order = plan.topological_order();
  ASSERT_EQ(order.size(), 4u);
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  EXPECT_LT(pos["a"], pos["b"]);
  EXPECT_LT(pos["b"], pos["c"]);
}

TEST(RunPlan, RejectsCyclesUnknownDepsAndDuplicates) {
  RunPlan cycle;
  cycle.add(Task{"a", {"b"}, "", {}, {}, [] {}});
  cycle.add(Task{"b", {"a"}, "", {}, {}, [] {}});
  EXPECT_THROW(cycle.topological_order(), std::invalid_argument);

  RunPlan unknown;
  unknown.add(Task{"a", {"ghost"}, "", {}, {}, [] {}});
  EXPECT_THROW(unknown.topological_order(), std::invalid_argument);

  RunPlan dup;
  dup.add(Task{"a", {}, "", {}, {}, [] {}});
  EXPECT_THROW(dup.add(Task{"a", {}, "", {}, {}, [] {}}), std::invalid_argument);
}

TEST(RunPlan, CachesByParamsAndInputBytes) {
  const fs::path dir = scratch_dir("cache");
  const fs::path in = dir / "in.txt";
  const fs::path out = dir / "out.txt";
  touch(in, "one");
  int runs = 0;
  const auto make = [&](const std::string& params) {
    RunPlan plan;
    plan.add(Task{"copy", {}, params, {in}, {out}, [&] {
                    ++runs;
                    touch(out, slurp(in));
                  }});
    return plan;
  };
  RunSummary s = make("p").execute(1);
  EXPECT_EQ(s.ran, 1);
  EXPECT_EQ(runs, 1);
  s = make("p").execute(1);
  EXPECT_EQ(s.ran, 0);
  EXPECT_EQ(s.cached, 1);
  EXPECT_EQ(runs, 1);

  touch(in, "two");
  s = make("p").execute(1);
  EXPECT_EQ(s.ran, 1);
  EXPECT_EQ(slurp(out), "two");

  s = make("q").execute(1);
  EXPECT_EQ(s.ran, 1);

  fs::remove(out);
  s = make("q").execute(1);
  EXPECT_EQ(s.ran, 1);
  EXPECT_EQ(runs, 4);
}

TEST(RunPlan, FailuresAreCollectedAndDependentsStillRun) {
  const fs::path dir = scratch_dir("failures");
  std::vector<std::string> seen;
  std::mutex m;
  const auto note = [&](const std::string& id) {
    std::lock_guard lock(m);
    seen.push_back(id);
  };
  RunPlan plan;
  plan.add(Task{"boom", {}, "", {}, {dir / "never.txt"}, [&] {
                  note("boom");
                  throw std::runtime_error("exploded");
                }});
  plan.add(Task{"lazy", {}, "", {}, {dir / "missing.txt"}, [&] { note("lazy"); }});
  plan.add(Task{"after", {"boom"}, "", {}, {dir / "after.txt"}, [&] {
                  note("after");
                  touch(dir / "after.txt", "ok");
                }});
  const RunSummary s = plan.execute(2);
  EXPECT_EQ(s.ran, 1);
  ASSERT_EQ(s.failed.size(), 2u);
  std::set<std::string> failed;
  for (const auto& [id, msg] : s.failed) failed.insert(id);
  EXPECT_TRUE(failed.count("boom"));
  EXPECT_TRUE(failed.count("lazy"));  // ran but produced no output
  EXPECT_EQ(std::count(seen.begin(), seen.end(), "after"), 1);
}

TEST(RunPlan, ParallelExecutionRunsEverythingOnce) {
  const fs::path dir = scratch_dir("parallel");
  std::atomic<int> runs{0};
  RunPlan plan;
  for (int i = 0; i < 20; ++i) {
    const fs::path out = dir / (std::to_string(i) + ".txt");
    std::vector<std::string> deps;
    if (i >= 10) deps.push_back(std::to_string(i - 10));
    plan.add(Task{std::to_string(i), deps, "", {}, {out}, [&runs, out] {
                    ++runs;
                    touch(out, "x");
                  }});
  }
  const RunSummary s = plan.execute(4);
  EXPECT_EQ(s.ran, 20);
  EXPECT_EQ(runs.load(), 20);
  EXPECT_TRUE(s.failed.empty());
}

TEST(CacheKey, SensitiveToParamsAndBytes) {
  const fs::path dir = scratch_dir("key");
  const fs::path f = dir / "f";
  touch(f, "abc");
  const std::string k1 = cache_key("p", {f});
  EXPECT_EQ(k1.size(), 16u);
  EXPECT_EQ(cache_key("p", {f}), k1);
  EXPECT_NE(cache_key("p2", {f}), k1);
  touch(f, "abd");
  EXPECT_NE(cache_key("p", {f}), k1);
  EXPECT_NE(cache_key("p", {dir / "absent"}), cache_key("p", {}));
}

// --- derived tables ---------------------------------------------------------

MetricsReport row(const std::string& method, int k, int draw, double elpd, double acc = 0.5,
                  double ece = 0.1) {
  MetricsReport r;
  r.experiment = "evaluate";
  r.method = method;
  r.k = k;
  r.draw = draw;
  r.seed = static_cast<std::uint64_t>(draw);
  r.elpd = elpd;
  r.accuracy = acc;
  r.ece = ece;
  return r;
}

TEST(AverageRanks, HandlesTies) {
  EXPECT_EQ(average_ranks({0.3, 0.1, 0.2}, false), (std::vector<double>{1, 3, 2}));
  EXPECT_EQ(average_ranks({0.3, 0.1, 0.2}, true), (std::vector<double>{3, 1, 2}));
  EXPECT_EQ(average_ranks({1, 1, 1}, false), (std::vector<double>{2, 2, 2}));
  EXPECT_EQ(average_ranks({5, 1, 5, 0}, false), (std::vector<double>{1.5, 3, 1.5, 4}));
}

TEST(RankMethods, StrictlyBestAndAllTied) {
  std::vector<MetricsReport> rows;
  for (int d = 0; d < 3; ++d) {
    rows.push_back(row("a", 1, d, -0.1, 0.9, 0.01));
    rows.push_back(row("b", 1, d, -0.2, 0.8, 0.02));
    rows.push_back(row("c", 1, d, -0.3, 0.7, 0.03));
    rows.push_back(row("a", 2, d, -0.5, 0.5, 0.1));
    rows.push_back(row("b", 2, d, -0.5, 0.5, 0.1));
    rows.push_back(row("c", 2, d, -0.5, 0.5, 0.1));
    rows.push_back(row("d", 2, d, -0.5, 0.5, 0.1));
  }
  const auto ranks = rank_methods(rows, {"a", "b", "c", "d"});
  for (const auto& r : ranks) {
    if (r.k == 1) ADD_FAILURE() << "K=1 lacks method d and must be skipped";
    EXPECT_EQ(r.mean_rank, 2.5);
  }
  int skipped = 0;
  const auto three = rank_methods(rows, {"a", "b", "c"}, &skipped);
  EXPECT_EQ(skipped, 0);
  for (const auto& r : three) {
    if (r.k == 1 && r.method == "a") { EXPECT_EQ(r.mean_rank, 1.0) << r.metric; }
    if (r.k == 1 && r.method == "c") { EXPECT_EQ(r.mean_rank, 3.0) << r.metric; }
    if (r.k == 2) { EXPECT_EQ(r.mean_rank, 2.0); }
    EXPECT_EQ(r.n_draws, 3);
  }
  rank_methods(rows, {"a", "b", "c", "d"}, &skipped);
  EXPECT_EQ(skipped, 3);
}

TEST(RankMethods, TwoMethodsTwoDrawsByHand) {
  // Draw 0: x wins elpd, y wins ece. Draw 1: tie on elpd, x wins ece.
  const std::vector<MetricsReport> rows = {
      row("x", 5, 0, -1.0, 0.6, 0.2), row("y", 5, 0, -2.0, 0.7, 0.1),
      row("x", 5, 1, -1.5, 0.6, 0.1), row("y", 5, 1, -1.5, 0.6, 0.3),
  };
  std::map<std::pair<std::string, std::string>, double> got;
  for (const auto& r : rank_methods(rows, {"x", "y"})) got[{r.method, r.metric}] = r.mean_rank;
  EXPECT_EQ(got[std::make_pair(std::string("x"), "elpd")], (1.0 + 1.5) / 2);
  EXPECT_EQ(got[std::make_pair(std::string("y"), "elpd")], (2.0 + 1.5) / 2);
  EXPECT_EQ(got[std::make_pair(std::string("x"), "ece")], (2.0 + 1.0) / 2);
  EXPECT_EQ(got[std::make_pair(std::string("x"), "accuracy")], (2.0 + 1.5) / 2);
}

TEST(Deltas, RelativeToMapAndToDe) {
  const std::vector<MetricsReport> rows = {
      row("de", 1, 0, -1.0),   row("de", 1, 1, -3.0),   // baseline mean -2
      row("llla", 1, 0, -0.5), row("llla", 1, 1, -2.5),  // mean -1.5
      row("de", 2, 0, -1.0),   row("swag", 2, 0, -0.9),
  };
  std::map<std::pair<std::string, int>, DeltaRow> map_rows;
  for (const auto& d : delta_vs_map(rows)) map_rows[{d.method, d.k}] = d;
  EXPECT_EQ(map_rows[std::make_pair(std::string("de"), 1)].mean, 0.0);
  EXPECT_DOUBLE_EQ(map_rows[std::make_pair(std::string("llla"), 1)].mean, 25.0);
  EXPECT_DOUBLE_EQ(map_rows[std::make_pair(std::string("de"), 2)].mean, 50.0);
  EXPECT_EQ(map_rows[std::make_pair(std::string("llla"), 1)].n_draws, 2);

  std::map<std::pair<std::string, int>, DeltaRow> de_rows;
  for (const auto& d : delta_vs_de(rows)) de_rows[{d.method, d.k}] = d;
  // Per draw: (-0.5 - -1)/1 = 50%, (-2.5 - -3)/3 = 16.67%.
  EXPECT_NEAR(de_rows[std::make_pair(std::string("llla"), 1)].mean, (50.0 + 50.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(de_rows[std::make_pair(std::string("swag"), 2)].mean, 10.0, 1e-12);
  EXPECT_EQ(de_rows[std::make_pair(std::string("de"), 2)].mean, 0.0);
  EXPECT_THROW(delta_vs_map({row("swag", 1, 0, -1.0)}), std::runtime_error);
}

TEST(MeanAndSe, MatchesTheTextbookFormula) {
  const auto [m, se] = mean_and_se({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_DOUBLE_EQ(se, std::sqrt(5.0 / 3.0) / 2.0);
  EXPECT_EQ(mean_and_se({7.0}).second, 0.0);
}

TEST(Seeds, SamplingSeedIgnoresLambdaAndSamples) {
  EXPECT_EQ(sampling_seed(1, "swag", 5, 3), sampling_seed(1, "swag", 5, 3));
  EXPECT_NE(sampling_seed(1, "swag", 5, 3), sampling_seed(1, "swag", 5, 4));
  EXPECT_NE(sampling_seed(1, "swag", 5, 3), sampling_seed(1, "llla", 5, 3));
  EXPECT_NE(sampling_seed(1, "swag", 5, 3), sampling_seed(2, "swag", 5, 3));
}

// --- small end-to-end pipeline ----------------------------------------------

ExperimentConfig tiny_config(const fs::path& dir, const std::string& kind = "two_moons") {
  ExperimentConfig c = default_config(kind);
  c.data.n = 120;
  c.hidden = {8, 8};
  c.train.epochs = 40;
  c.pool_size = 3;
  c.ks = {1, 2};
  c.n_draws = 3;
  c.s_select = 10;
  c.s_test = 20;
  c.flow_lengths = {2};
  c.methods = c.fitted_methods();
  c.flow_prior_grid = {1.0, 10.0};
  c.swag_epochs = 4;
  c.swag_rank = 3;
  c.flow_epochs = 2;
  c.ablate_samples = {1, 5, 20};
  c.ablate_k = 2;
  c.lambdas = {1e-3, 1.0};
  c.lambda_methods = {"swag", "llla", "lanf-2"};
  c.seed = 3;
  c.work_dir = dir;
  return c;
}

std::map<std::string, MetricsReport> keyed(const std::vector<MetricsReport>& rows) {
  std::map<std::string, MetricsReport> out;
  for (const auto& r : rows) out[r.method + "/" + std::to_string(r.k) + "/" + std::to_string(r.draw)] = r;
  return out;
}

std::vector<std::string> csv_header(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
  return cols;
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch_dir("pipeline"));
    config_ = new ExperimentConfig(tiny_config(*dir_));
    first_ = new RunSummary(run_pipeline(*config_));
  }
  static void TearDownTestSuite() {
    delete first_;
    delete config_;
    delete dir_;
  }

  static std::vector<MetricsReport> store(const std::string& name) {
    return ResultStore(WorkLayout{*dir_}.store(name)).read();
  }

  static fs::path* dir_;
  static ExperimentConfig* config_;
  static RunSummary* first_;
};

fs::path* TinyPipeline::dir_ = nullptr;
ExperimentConfig* TinyPipeline::config_ = nullptr;
RunSummary* TinyPipeline::first_ = nullptr;

TEST_F(TinyPipeline, CompletesWithoutFailures) {
  for (const auto& [id, msg] : first_->failed) ADD_FAILURE() << id << ": " << msg;
  EXPECT_GT(first_->ran, 0);
  EXPECT_EQ(first_->cached, 0);
}

TEST_F(TinyPipeline, RerunHitsTheCache) {
  const RunSummary again = run_pipeline(*config_);
  EXPECT_EQ(again.ran, 0);
  EXPECT_EQ(again.cached, first_->ran);
  EXPECT_TRUE(again.failed.empty());
}

TEST_F(TinyPipeline, ChangingAnExperimentSettingKeepsThePool) {
  ExperimentConfig c = *config_;
  c.s_test = 21;
  RunPlan plan;
  plan_command(c, Command::evaluate, true, plan);
  const RunSummary s = plan.execute(1);
  EXPECT_EQ(s.ran, 1);  // only the evaluate stage
  EXPECT_TRUE(s.failed.empty());
  run_command(*config_, Command::evaluate);
}

TEST_F(TinyPipeline, MembersHaveDistinctParameters) {
  const WorkLayout L{*dir_};
  const Checkpoint a = load<Checkpoint>(L.checkpoint(0));
  const Checkpoint b = load<Checkpoint>(L.checkpoint(1));
  EXPECT_NE(a.theta.values, b.theta.values);
  EXPECT_EQ(a.spec, b.spec);
  EXPECT_EQ(a.trace.size(), static_cast<std::size_t>(config_->train.epochs));
}

TEST_F(TinyPipeline, OnePosteriorFilePerMemberAndMethod) {
  const WorkLayout L{*dir_};
  for (const auto& m : config_->fitted_methods()) {
    for (int i = 0; i < config_->pool_size; ++i) {
      ASSERT_TRUE(fs::exists(L.posterior(m, i))) << m << " " << i;
      const PosteriorHandle h = load<PosteriorHandle>(L.posterior(m, i));
      EXPECT_EQ(h.method, m);
      EXPECT_EQ(h.provenance, member_id(i));
    }
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(*dir_ / "posteriors")) {
    files += e.path().extension() == ".post";
  }
  EXPECT_EQ(files, config_->fitted_methods().size() * static_cast<std::size_t>(config_->pool_size));
}

TEST_F(TinyPipeline, TuningTablesCoverTheFullGrids) {
  const WorkLayout L{*dir_};
  for (int i = 0; i < config_->pool_size; ++i) {
    const auto llla = load<PosteriorHandle>(L.posterior("llla", i));
    ASSERT_TRUE(llla.tuning);
    EXPECT_EQ(llla.tuning->table.rows.size(), 21u);
    const auto swag = load<PosteriorHandle>(L.posterior("swag", i));
    ASSERT_TRUE(swag.tuning);
    EXPECT_EQ(swag.tuning->table.rows.size(), 21u);
    const auto flow = load<PosteriorHandle>(L.posterior("lanf-2", i));
    ASSERT_TRUE(flow.tuning);
    EXPECT_EQ(flow.tuning->table.rows.size(), config_->flow_prior_grid.size());
  }
}

TEST_F(TinyPipeline, EvaluateCoversEveryCell) {
  const auto rows = store("evaluate");
  EXPECT_EQ(rows.size(), config_->methods.size() * config_->ks.size() * config_->n_draws);
  for (const auto& r : rows) {
    EXPECT_TRUE(std::isfinite(r.elpd));
    EXPECT_LE(r.elpd, 0.0);
    EXPECT_EQ(r.samples, config_->s_test);
    ASSERT_TRUE(r.accuracy);
    EXPECT_GE(*r.accuracy, 0.0);
    EXPECT_LE(*r.accuracy, 1.0);
  }
  for (const auto& d : delta_vs_map(rows)) {
    if (d.method == "de" && d.k == 1) { EXPECT_EQ(d.mean, 0.0); }
  }
}

TEST_F(TinyPipeline, UnitLambdaReproducesEvaluate) {
  const auto eval = keyed(store("evaluate"));
  int matched = 0;
  for (const auto& r : store("sweep_lambda")) {
    if (r.lambda != 1.0) continue;
    const auto& e = eval.at(r.method + "/" + std::to_string(r.k) + "/" + std::to_string(r.draw));
    EXPECT_EQ(r.elpd, e.elpd) << r.method;
    EXPECT_EQ(r.seed, e.seed);
    ++matched;
  }
  EXPECT_EQ(matched, static_cast<int>(config_->lambda_methods.size() * config_->ks.size()) *
                         config_->n_draws);
}

TEST_F(TinyPipeline, FullSampleAblationReproducesEvaluate) {
  ExperimentConfig c = *config_;
  c.ablate_samples = {c.s_test};
  c.work_dir = *dir_;
  run_command(c, Command::ablate_samples);
  const auto eval = keyed(store("evaluate"));
  int matched = 0;
  for (const auto& r : store("ablate_samples")) {
    if (r.sampling != "stratified") continue;
    const auto& e = eval.at(r.method + "/" + std::to_string(r.k) + "/" + std::to_string(r.draw));
    EXPECT_EQ(r.elpd, e.elpd) << r.method;
    ++matched;
  }
  EXPECT_EQ(matched, static_cast<int>(config_->methods.size()) * config_->n_draws);
  run_command(*config_, Command::ablate_samples);
}

TEST_F(TinyPipeline, OodRowsShareTheEvaluateSamples) {
  const auto eval = keyed(store("evaluate"));
  const auto rows = store("ood");
  EXPECT_EQ(rows.size(), config_->methods.size() * config_->ks.size() * config_->n_draws);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.auroc);
    EXPECT_GE(*r.auroc, 0.0);
    EXPECT_LE(*r.auroc, 1.0);
    EXPECT_EQ(r.elpd, eval.at(r.method + "/" + std::to_string(r.k) + "/" + std::to_string(r.draw)).elpd);
  }
}

TEST_F(TinyPipeline, ProbitRowsForBothSelectionCriteria) {
  std::set<std::string> experiments;
  for (const auto& r : store("probit")) {
    experiments.insert(r.experiment);
    EXPECT_EQ(r.sampling, "probit");
  }
  EXPECT_EQ(experiments, (std::set<std::string>{"probit:cv=mc", "probit:cv=probit"}));
}

TEST_F(TinyPipeline, ReportsHaveTheirColumns) {
  const fs::path reports = *dir_ / "reports";
  EXPECT_EQ(csv_header(reports / "stacking.csv"),
            (std::vector<std::string>{"method", "k", "draw", "normalized_entropy", "uniform_elpd",
                                      "stacked_elpd", "delta_elpd", "iterations", "converged"}));
  for (const char* name : {"results_evaluate.csv", "fig1_delta_vs_map.csv", "fig1_delta_vs_de.csv",
                           "fig2_samples.csv", "fig2_stratified_minus_iid.csv", "fig3_lambda.csv",
                           "fig4_ood.csv", "table1_ranks.csv", "tableD2_probit.csv", "tuning.csv"}) {
    EXPECT_TRUE(fs::exists(reports / name)) << name;
    EXPECT_FALSE(csv_header(reports / name).empty()) << name;
  }
}

TEST_F(TinyPipeline, StackingWeightsStayOnTheSimplex) {
  std::ifstream in(*dir_ / "reports" / "stacking.csv");
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string col; std::getline(ss, col, ',');) f.push_back(col);
    ASSERT_EQ(f.size(), 9u);
    const double h = std::stod(f[3]);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 1.0 + 1e-12);
    EXPECT_NEAR(std::stod(f[6]), std::stod(f[5]) - std::stod(f[4]), 1e-9);
    ++rows;
  }
  EXPECT_GT(rows, 0);
}

TEST_F(TinyPipeline, FreshDirectoryReproducesEveryStoreByteForByte) {
  const fs::path other = scratch_dir("pipeline_copy");
  ExperimentConfig c = *config_;
  c.work_dir = other;
  c.workers = 2;
  const RunSummary s = run_pipeline(c);
  EXPECT_TRUE(s.failed.empty());
  for (const auto& e : fs::directory_iterator(*dir_ / "results")) {
    if (e.path().extension() != ".jsonl") continue;
    EXPECT_EQ(slurp(e.path()), slurp(other / "results" / e.path().filename())) << e.path().filename();
  }
  EXPECT_EQ(slurp(*dir_ / "reports" / "stacking.csv"), slurp(other / "reports" / "stacking.csv"));
}

TEST(RegressionPipeline, RunsEndToEnd) {
  const fs::path dir = scratch_dir("regression");
  ExperimentConfig c = tiny_config(dir, "regression");
  c.lambda_methods = {"swag", "llla"};
  const RunSummary s = run_pipeline(c);
  for (const auto& [id, msg] : s.failed) ADD_FAILURE() << id << ": " << msg;
  const auto rows = ResultStore(WorkLayout{dir}.store("evaluate")).read();
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) {
    EXPECT_EQ(r.task, "regression");
    EXPECT_TRUE(r.n_mae);
    EXPECT_FALSE(r.accuracy);
  }
  EXPECT_FALSE(fs::exists(WorkLayout{dir}.store("probit")));
}

TEST(Pipeline, FailedMembersLeaveHolesNotCrashes) {
  const fs::path dir = scratch_dir("diverge");
  ExperimentConfig c = tiny_config(dir);
  c.train.lr = 1e30;
  c.methods = {"de"};
  c.lambda_methods = {};
  RunPlan plan;
  plan_command(c, Command::evaluate, true, plan);
  const RunSummary s = plan.execute(1);
  EXPECT_FALSE(s.failed.empty());
  EXPECT_TRUE(fs::exists(WorkLayout{dir}.failure(0)));
  EXPECT_TRUE(ResultStore(WorkLayout{dir}.store("evaluate")).read().empty());
  EXPECT_FALSE(slurp(dir / "results" / "evaluate.skipped.csv").empty());
}

}  // namespace
}  // namespace debnn
