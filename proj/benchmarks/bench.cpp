// Microbenchmarks for the inner loops of evaluation and fitting.

#include <benchmark/benchmark.h>

#include <vector>

#include "debnn/ensemble.hpp"
#include "debnn/metrics.hpp"
#include "debnn/nn.hpp"
#include "debnn/posteriors.hpp"
#include "debnn/radial_flow.hpp"
#include "debnn/rng.hpp"

namespace {

using namespace debnn;

Batch moons_like(Eigen::Index n, int classes, Rng& rng) {
  Batch b;
  b.x.resize(n, 2);
  b.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    b.x.row(i) = rng.normal_vector(2).transpose();
    b.y[i] = static_cast<double>(i % classes);
  }
  return b;
}

void BM_Forward(benchmark::State& state) {
  const auto spec = NetworkSpec::classifier({50, 50}, 2, 2);
  const ParamVector theta = init_params(spec, 1);
  Rng rng(2);
  const Batch b = moons_like(state.range(0), 2, rng);
  for (auto _ : state) benchmark::DoNotOptimize(forward(spec, theta, b.x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(100)->Arg(1000);

void BM_LossAndGrad(benchmark::State& state) {
  const auto spec = NetworkSpec::classifier({50, 50}, 2, 2);
  const ParamVector theta = init_params(spec, 1);
  Rng rng(3);
  const Batch b = moons_like(state.range(0), 2, rng);
  for (auto _ : state) benchmark::DoNotOptimize(nll_and_grad(spec, theta, b, 1e-3));
}
BENCHMARK(BM_LossAndGrad)->Arg(32)->Arg(280);

void BM_LastLayerGgn(benchmark::State& state) {
  const auto spec = NetworkSpec::classifier({50, 50}, 2, static_cast<int>(state.range(0)));
  const ParamVector theta = init_params(spec, 1);
  Rng rng(4);
  const Batch b = moons_like(280, static_cast<int>(state.range(0)), rng);
  for (auto _ : state) benchmark::DoNotOptimize(last_layer_ggn(spec, theta, b));
}
BENCHMARK(BM_LastLayerGgn)->Arg(2)->Arg(3);

void BM_RadialFlow(benchmark::State& state) {
  Rng rng(5);
  std::vector<RadialFlow> flows;
  for (int t = 0; t < state.range(0); ++t) flows.push_back(RadialFlow{rng.normal_vector(102), 0.0, 0.5});
  const Eigen::VectorXd z = rng.normal_vector(102);
  for (auto _ : state) benchmark::DoNotOptimize(flow_forward(flows, z));
}
BENCHMARK(BM_RadialFlow)->Arg(2)->Arg(10);

void BM_SwagSample(benchmark::State& state) {
  Rng rng(6);
  std::vector<ParamVector> its;
  for (int i = 0; i < 40; ++i) its.push_back(ParamVector{rng.normal_vector(state.range(0)), Partition{0, 2}});
  const SwagPosterior post = swag_from_iterates(its, 20);
  for (auto _ : state) benchmark::DoNotOptimize(post.sample(rng));
}
BENCHMARK(BM_SwagSample)->Arg(2802);

void BM_MixturePredictive(benchmark::State& state) {
  const auto spec = NetworkSpec::classifier({50, 50}, 2, 2);
  std::vector<PosteriorHandle> members;
  for (int k = 0; k < state.range(0); ++k) {
    members.push_back({spec, PointMassPosterior{init_params(spec, 10 + k)}, "m", "de", {}});
  }
  const MixturePosterior mix = build_mixture(std::move(members));
  Rng rng(7);
  const Batch b = moons_like(1000, 2, rng);
  const SampleBatch draws = stratified_sample(mix, 200, 8);
  for (auto _ : state) benchmark::DoNotOptimize(predictive(spec, draws, b));
}
BENCHMARK(BM_MixturePredictive)->Arg(1)->Arg(20);

}  // namespace

BENCHMARK_MAIN();
