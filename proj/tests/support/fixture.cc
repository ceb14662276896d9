#include "fixture.h"

#include <cmath>
#include <fstream>
#include <random>

#include "causalmeta/stats.h"

namespace causalmeta::testing {

const std::array<FixtureStudy, 5>& psoriasis_like_studies() {
  static const std::array<FixtureStudy, 5> studies = {{
      {1, {{{20, 85.0, 49.1, 12.8, 28.3, 6.3, 21.3, 7.5, 75.0},
            {52, 78.9, 46.3, 12.0, 27.9, 5.8, 23.0, 9.7, 94.2}}}},
      {2, {{{25, 72.0, 43.8, 14.3, 30.3, 7.1, 18.7, 7.0, 84.0},
            {91, 74.7, 46.7, 13.3, 29.6, 7.0, 18.7, 5.8, 90.1}}}},
      {3, {{{43, 60.5, 49.1, 12.8, 31.1, 7.2, 20.4, 6.8, 58.1},
            {118, 61.9, 50.4, 14.2, 31.2, 7.3, 21.3, 7.9, 84.8}}}},
      {4, {{{27, 66.7, 48.9, 15.2, 31.8, 7.0, 18.6, 5.1, 70.4},
            {85, 68.2, 47.3, 13.4, 31.7, 7.4, 20.0, 7.2, 94.1}}}},
      {5, {{{42, 66.7, 53.1, 14.4, 33.1, 6.9, 18.3, 6.5, 69.1},
            {133, 72.2, 47.3, 13.4, 31.7, 6.8, 20.3, 8.9, 87.2}}}},
  }};
  return studies;
}

IpdTrial simulate_fixture_ipd(const FixtureStudy& study, std::uint64_t seed) {
  auto rng = make_engine(seed, {static_cast<std::uint64_t>(study.id)});
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  const Index n = study.arms[0].n + study.arms[1].n;
  IpdTrial t;
  t.study_id = study.id;
  t.covariates.resize(n, 4);
  t.treatment.resize(n);
  t.outcome.resize(n);
  Index i = 0;
  for (int x = 0; x < 2; ++x) {
    const auto& a = study.arms[static_cast<std::size_t>(x)];
    const double p = a.response_pct / 100.0;
    const double base = std::log(p / (1.0 - p));
    for (int r = 0; r < a.n; ++r, ++i) {
      const double male = unif(rng) < a.male_pct / 100.0 ? 1.0 : 0.0;
      const double age = std::max(18.0, a.age_mean + a.age_sd * normal(rng));
      const double bmi = std::max(16.0, a.bmi_mean + a.bmi_sd * normal(rng));
      const double pasi = std::max(12.0, a.pasi_mean + a.pasi_sd * normal(rng));
      const double eta =
          base - 0.04 * (bmi - a.bmi_mean) + 0.03 * (pasi - a.pasi_mean);
      t.covariates.row(i) << male, age, bmi, pasi;
      t.treatment[i] = x;
      t.outcome[i] = unif(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
    }
  }
  t.validate();
  return t;
}

AggregatedTrial fixture_aggregate(const FixtureStudy& study) {
  AggregatedTrial agg;
  agg.study_id = study.id;
  const double n = study.arms[0].n + study.arms[1].n;
  for (int x = 0; x < 2; ++x) {
    const auto& a = study.arms[static_cast<std::size_t>(x)];
    auto& arm = agg.arms[static_cast<std::size_t>(x)];
    arm.x = x;
    arm.n = a.n;
    const double male = a.male_pct / 100.0;
    arm.mean_l = Vector(4);
    arm.mean_l << male, a.age_mean, a.bmi_mean, a.pasi_mean;
    arm.raw2_l = Vector(4);
    arm.raw2_l << male, a.age_sd * a.age_sd + a.age_mean * a.age_mean,
        a.bmi_sd * a.bmi_sd + a.bmi_mean * a.bmi_mean,
        a.pasi_sd * a.pasi_sd + a.pasi_mean * a.pasi_mean;
    arm.mean_y = a.response_pct / 100.0;
    agg.allocation[static_cast<std::size_t>(x)] = a.n / n;
  }
  const double p1 = agg.arms[1].mean_y;
  const double p0 = agg.arms[0].mean_y;
  agg.own_effect.scale = EffectScale::kLogRelativeRisk;
  agg.own_effect.estimate = std::log(p1 / p0);
  agg.own_effect.se = std::sqrt((1.0 - p1) / (agg.arms[1].n * p1) +
                                (1.0 - p0) / (agg.arms[0].n * p0));
  agg.validate();
  return agg;
}

void write_fixture(const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::json config = {{"ipd", nlohmann::json::array()},
                           {"aggregated", nlohmann::json::array()},
                           {"basis", "linear"},
                           {"truncation_percentile", 0.95},
                           {"scale", "log-rr"},
                           {"target_moments", "reconstruction"},
                           {"meat", "blocks"}};
  for (const auto& s : psoriasis_like_studies()) {
    const std::string stem = "study" + std::to_string(s.id);
    if (s.id <= 2) {
      std::ofstream(dir / (stem + ".json")) << to_json(fixture_aggregate(s)).dump(2) << '\n';
      config["aggregated"].push_back(stem + ".json");
    } else {
      save_ipd(dir / (stem + ".csv"), simulate_fixture_ipd(s, seed));
      config["ipd"].push_back(stem + ".csv");
    }
  }
  std::ofstream(dir / "config.json") << config.dump(2) << '\n';
}

}  // namespace causalmeta::testing
