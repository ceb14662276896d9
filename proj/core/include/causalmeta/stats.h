#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "causalmeta/types.h"

namespace causalmeta {

// Deterministic engine for a (seed, stream...) pair. Streams give
// independent sub-seeds (replicate index, chain index) without shared state.
std::mt19937_64 make_engine(std::uint64_t seed,
                            std::initializer_list<std::uint64_t> streams = {});

// Derives a child seed; make_engine(derive_seed(s, {r})) is reproducible
// for replicate r in isolation.
std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> streams);

// Empirical-CDF inverse: smallest order statistic x with F(x) >= p.
double quantile_inverse_cdf(std::span<const double> values, double p);

// Linear interpolation between order statistics (R type 7).
double quantile_linear(std::span<const double> values, double p);

double median(std::span<const double> values);
double mean(std::span<const double> values);
// Divisor n - 1.
double sample_variance(std::span<const double> values);

struct Summary {
  double median = 0.0;
  double lower = 0.0;  // 2.5% quantile
  double upper = 0.0;  // 97.5% quantile
};

Summary summarize_draws(std::span<const double> draws);

// Split potential scale reduction factor over equal-length chains.
double split_rhat(const std::vector<std::vector<double>>& chains);

// Runs body(i) for i in [0, count) on up to `threads` workers. Iterations
// are independent; callers write results into per-index slots.
void parallel_for(std::size_t count, unsigned threads,
                  const std::function<void(std::size_t)>& body);

unsigned default_thread_count();

}  // namespace causalmeta
