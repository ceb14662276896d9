#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/types.h"

namespace causalmeta {

// Participant-level data for one trial. Covariates are real valued; binary
// covariates are stored as 0/1.
struct IpdTrial {
  int study_id = 0;
  Matrix covariates;     // n x (p-1)
  IntVector treatment;   // 0/1
  IntVector outcome;     // 0/1

  Index size() const { return covariates.rows(); }
  Index num_covariates() const { return covariates.cols(); }
  Index arm_size(int x) const;

  // Throws ValidationError when an invariant does not hold.
  void validate() const;
};

struct ArmSummary {
  int x = 0;
  int n = 0;
  Vector mean_l;   // E(L | X = x)
  Vector raw2_l;   // E(L^2 | X = x), coordinate-wise
  double mean_y = 0.0;
};

struct OwnEffect {
  EffectScale scale = EffectScale::kRiskDifference;
  double estimate = 0.0;
  double se = 0.0;
};

// Published summaries of a trial without accessible participant data.
struct AggregatedTrial {
  int study_id = 0;
  std::array<ArmSummary, 2> arms;        // indexed by treatment value
  std::array<double, 2> allocation{};    // r_0, r_1
  OwnEffect own_effect;

  int size() const { return arms[0].n + arms[1].n; }
  Index num_covariates() const { return arms[0].mean_l.size(); }
  void validate() const;
};

struct PooledMoments {
  Vector mean;
  Vector raw2;
};

// m = sum_x r_x * m_x for first and raw second moments.
PooledMoments pool_arm_moments(const AggregatedTrial& trial);

// Arm-level summaries of an IPD trial; allocation is the observed arm share
// and the own effect is computed on `scale`.
AggregatedTrial summarize(const IpdTrial& trial, EffectScale scale);

// Unweighted arm risk and its standard error contribution helpers.
OwnEffect crude_effect(const IpdTrial& trial, EffectScale scale);

// CSV with header study,treat,outcome,l1,...,l{p-1}. An optional trailing
// `pseudo` column is accepted and ignored. All rows must share one study id.
IpdTrial parse_ipd_csv(std::istream& in, const std::string& source_name);
IpdTrial load_ipd(const std::filesystem::path& path);
void write_ipd_csv(std::ostream& out, const IpdTrial& trial,
                   bool pseudo_marker = false);
void save_ipd(const std::filesystem::path& path, const IpdTrial& trial,
              bool pseudo_marker = false);

AggregatedTrial aggregated_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const AggregatedTrial& trial);
AggregatedTrial load_agg(const std::filesystem::path& path);

// Ordered collection: aggregated trials first (ids 1..z), IPD trials after
// (ids z+1..q). Original ids are kept for reporting.
class StudyCollection {
 public:
  StudyCollection(std::vector<AggregatedTrial> aggregated,
                  std::vector<IpdTrial> ipd);

  int q() const { return static_cast<int>(aggregated_.size() + ipd_.size()); }
  int z() const { return static_cast<int>(aggregated_.size()); }
  Index num_covariates() const { return num_covariates_; }
  double total_size() const;

  bool has_ipd(int study) const { return study > z(); }
  const AggregatedTrial& aggregated(int study) const;
  const IpdTrial& ipd(int study) const;
  const std::vector<AggregatedTrial>& aggregated_trials() const {
    return aggregated_;
  }
  const std::vector<IpdTrial>& ipd_trials() const { return ipd_; }
  double study_size(int study) const;

  int original_id(int study) const;
  const std::vector<int>& original_ids() const { return original_ids_; }

 private:
  std::vector<AggregatedTrial> aggregated_;
  std::vector<IpdTrial> ipd_;
  std::vector<int> original_ids_;
  Index num_covariates_ = 0;
};

}  // namespace causalmeta
