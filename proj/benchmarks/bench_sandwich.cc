#include <benchmark/benchmark.h>

#include <map>

#include "causalmeta/sandwich.h"
#include "causalmeta/simulation.h"

namespace cm = causalmeta;

namespace {

// Source 2 standardized to all three populations of the transport design.
struct Setup {
  std::vector<cm::IpdTrial> trials;
  cm::BasisSpec spec = cm::BasisSpec::main_effects(2);
  std::map<int, cm::Matrix> rows;
  std::map<int, cm::TargetMoments> moments;
  std::vector<cm::StackTarget> targets;
  double pooled = 0.0;

  explicit Setup(cm::Index n) : trials(cm::dgp_transport(1, n, 3)) {
    for (const auto& t : trials) {
      rows[t.study_id] = t.covariates;
      moments[t.study_id] = cm::target_moments_from_rows(t.study_id, t.covariates, spec);
      pooled += static_cast<double>(t.size());
      auto fit = t.study_id == 2 ? cm::identity_fit(trials[1], spec, spec)
                                 : cm::solve_weights(trials[1], cm::target_from_ipd(t, spec), spec);
      targets.push_back({std::move(fit), static_cast<double>(t.size())});
    }
  }
};

}  // namespace

static void BM_SandwichBlocks(benchmark::State& state) {
  const Setup s(state.range(0));
  for (auto _ : state) {
    const cm::EstimatingStack stack(s.trials[1], s.targets, s.pooled, cm::EffectScale::kLogRelativeRisk);
    benchmark::DoNotOptimize(cm::sandwich(stack, s.moments));
  }
}
BENCHMARK(BM_SandwichBlocks)->Arg(2000)->Arg(10000)->Unit(benchmark::kMicrosecond);

static void BM_SandwichStacking(benchmark::State& state) {
  const Setup s(state.range(0));
  for (auto _ : state) {
    const cm::EstimatingStack stack(s.trials[1], s.targets, s.pooled, cm::EffectScale::kLogRelativeRisk);
    benchmark::DoNotOptimize(cm::sandwich_by_stacking(stack, s.rows));
  }
}
BENCHMARK(BM_SandwichStacking)->Arg(2000)->Arg(10000)->Unit(benchmark::kMicrosecond);
