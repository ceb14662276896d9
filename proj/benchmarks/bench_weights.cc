#include <benchmark/benchmark.h>

#include "causalmeta/covariance_reconstruction.h"
#include "causalmeta/simulation.h"
#include "causalmeta/weights.h"

namespace cm = causalmeta;

static void BM_SolveWeights(benchmark::State& state) {
  const auto trials = cm::dgp_transport(1, state.range(0), 1);
  const auto spec = cm::BasisSpec::parse(state.range(1) ? "quadratic" : "linear", 2);
  const auto target = cm::target_from_ipd(trials[0], spec);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cm::solve_weights(trials[1], target, spec));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SolveWeights)
    ->ArgsProduct({{500, 2000, 10000}, {0, 1}})
    ->ArgNames({"n", "quadratic"})
    ->Unit(benchmark::kMicrosecond);

static void BM_ReconstructCovariance(benchmark::State& state) {
  const auto trials = cm::dgp_transport(1, state.range(0), 2);
  const auto spec = cm::BasisSpec::main_effects(2);
  const auto hidden = cm::summarize(trials[0], cm::EffectScale::kRiskDifference);
  const std::vector<cm::IpdTrial> sources{trials[1], trials[2]};
  for (auto _ : state) {
    benchmark::DoNotOptimize(cm::reconstruct_covariance(hidden, sources, spec, spec));
  }
}
BENCHMARK(BM_ReconstructCovariance)->Arg(2000)->Arg(10000)->Unit(benchmark::kMicrosecond);
