#include "causalmeta/stats.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace causalmeta {

namespace {

std::vector<std::uint32_t> seed_words(std::uint64_t seed,
                                      std::initializer_list<std::uint64_t> s) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * s.size());
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto v : s) push(v);
  return words;
}

std::vector<double> sorted_copy(std::span<const double> values) {
  if (values.empty()) throw ValidationError("quantile of an empty sample");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

std::mt19937_64 make_engine(std::uint64_t seed,
                            std::initializer_list<std::uint64_t> streams) {
  auto words = seed_words(seed, streams);
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> streams) {
  auto engine = make_engine(seed, streams);
  return engine();
}

double quantile_inverse_cdf(std::span<const double> values, double p) {
  auto v = sorted_copy(values);
  const auto n = static_cast<double>(v.size());
  auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

double quantile_linear(std::span<const double> values, double p) {
  auto v = sorted_copy(values);
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double median(std::span<const double> values) {
  return quantile_linear(values, 0.5);
}

double mean(std::span<const double> values) {
  if (values.empty()) throw ValidationError("mean of an empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

double sample_variance(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return ss / static_cast<double>(values.size() - 1);
}

Summary summarize_draws(std::span<const double> draws) {
  return {quantile_linear(draws, 0.5), quantile_linear(draws, 0.025),
          quantile_linear(draws, 0.975)};
}

double split_rhat(const std::vector<std::vector<double>>& chains) {
  std::vector<std::span<const double>> halves;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    if (half < 2) continue;
    halves.emplace_back(c.data(), half);
    halves.emplace_back(c.data() + (c.size() - half), half);
  }
  if (halves.size() < 2) return 1.0;
  const double len = static_cast<double>(halves.front().size());
  std::vector<double> means;
  double within = 0.0;
  for (auto h : halves) {
    means.push_back(mean(h));
    within += sample_variance(h);
  }
  within /= static_cast<double>(halves.size());
  const double between = len * sample_variance(means);
  if (within <= 0.0) return between > 0.0 ? INFINITY : 1.0;
  const double var_plus = (len - 1.0) / len * within + between / len;
  return std::sqrt(var_plus / within);
}

unsigned default_thread_count() {
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, unsigned threads,
                  const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const auto n = std::min<std::size_t>(threads, count);
  pool.reserve(n);
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace causalmeta
