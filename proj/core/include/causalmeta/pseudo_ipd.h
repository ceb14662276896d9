#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/covariance_reconstruction.h"
#include "causalmeta/data_model.h"

namespace causalmeta {

// n x p sample whose mean is exactly `mu` and whose covariance (divisor n)
// is exactly `cov`: a standard normal draw is centered, whitened by its own
// sample covariance, recolored by a square root of `cov` and shifted.
// Requires n > p so the base sample has full rank.
Matrix generate_covariates(Index n, const Vector& mu, const Matrix& cov,
                           std::uint64_t seed);

struct MatchedMomentReport {
  Vector target_mean;
  Matrix target_covariance;
  double mean_error = 0.0;        // max abs deviation
  double covariance_error = 0.0;  // Frobenius deviation
  std::array<int, 2> successes{};
  std::array<double, 2> rounding_residual{};  // target count - realized count
};

struct PseudoTrial {
  IpdTrial data;
  MatchedMomentReport report;
  std::vector<std::string> warnings;
};

// Allocates treatment labels to match the reported arm sizes and places
// round-half-even(n_x * mean_y) successes at random within each arm.
PseudoTrial assign_arms_outcomes(const AggregatedTrial& trial,
                                 const Matrix& covariates, std::uint64_t seed);

// Covariance used for pseudo rows: reconstructed off-diagonals; reported
// variances on the diagonal where they agree with the reconstruction within
// 5% relative. Larger disagreements keep the reconstruction and add a
// warning.
Matrix pseudo_target_covariance(const AggregatedTrial& trial,
                                const ReconstructedMoments& reconstructed,
                                std::vector<std::string>& warnings);

PseudoTrial make_pseudo_trial(const AggregatedTrial& trial,
                              const ReconstructedMoments& reconstructed,
                              std::uint64_t seed);

nlohmann::json to_json(const PseudoTrial& pseudo);

}  // namespace causalmeta
