#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "causalmeta/data_model.h"

namespace causalmeta::testing {

// Summary line of one arm: size, % men, age, BMI, baseline PASI
// (mean, SD) and % reaching PASI75.
struct FixtureArm {
  int n = 0;
  double male_pct = 0.0;
  double age_mean = 0.0, age_sd = 0.0;
  double bmi_mean = 0.0, bmi_sd = 0.0;
  double pasi_mean = 0.0, pasi_sd = 0.0;
  double response_pct = 0.0;
};

// arms[1] = risankizumab, arms[0] = ustekinumab.
struct FixtureStudy {
  int id = 0;
  std::array<FixtureArm, 2> arms;
};

// Five head-to-head trials; 1 and 2 report summaries only, 3-5 have
// participant data.
const std::array<FixtureStudy, 5>& psoriasis_like_studies();

// Covariates (male, age, bmi, pasi) drawn per arm from the arm summaries;
// PASI75 response depends mildly on BMI and baseline PASI.
IpdTrial simulate_fixture_ipd(const FixtureStudy& study, std::uint64_t seed);

// Aggregated record built straight from the summary line; the reported
// effect is a log relative risk with its delta-method standard error.
AggregatedTrial fixture_aggregate(const FixtureStudy& study);

// study1.json, study2.json, study3.csv .. study5.csv and config.json.
void write_fixture(const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace causalmeta::testing
