#include <benchmark/benchmark.h>

#include "causalmeta/meta_model.h"
#include "causalmeta/simulation.h"

namespace cm = causalmeta;

namespace {

cm::EffectTable meta_table(int q, int z) {
  const cm::Matrix sigma = cm::gen_residual_cov(q, 1);
  const Eigen::LLT<cm::Matrix> llt(sigma);
  return cm::EffectTable::from_full(q, z, cm::draw_meta_effects(q, 0.0, 0.5, 0.5, llt, 7), sigma);
}

}  // namespace

// Default adaptation and sampling lengths, one thread.
static void BM_MetaMcmc(benchmark::State& state) {
  const auto table = meta_table(static_cast<int>(state.range(0)), static_cast<int>(state.range(0) / 2));
  cm::MetaOptions options;
  for (auto _ : state) {
    benchmark::DoNotOptimize(cm::fit_submodel_mcmc(table, options, 1));
  }
}
BENCHMARK(BM_MetaMcmc)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

static void BM_MetaReml(benchmark::State& state) {
  const auto table = meta_table(static_cast<int>(state.range(0)), static_cast<int>(state.range(0) / 2));
  for (auto _ : state) {
    benchmark::DoNotOptimize(cm::fit_submodel_reml(table));
  }
}
BENCHMARK(BM_MetaReml)->Arg(10)->Arg(20)->Arg(30)->Unit(benchmark::kMicrosecond);
