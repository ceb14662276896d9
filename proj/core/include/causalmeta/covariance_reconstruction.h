#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/data_model.h"
#include "causalmeta/weights.h"

namespace causalmeta {

// Weighted first and raw second moments of the covariates of one source,
// transported to the fit's target population.
struct SourceMoments {
  int source = 0;
  int target = 0;
  double source_size = 0.0;
  Vector mean;
  Matrix raw2;  // sum_i w_i L_i L_i' with self-normalized weights
};

SourceMoments second_moment_from_source(const IpdTrial& source,
                                        const PropensityRatioFit& fit);

enum class SourceAveraging { kUnweighted, kSampleSize };

struct ReconstructedMoments {
  int target = 0;
  Vector mean;
  Matrix second_moment;
  Matrix covariance;
  std::vector<int> sources;
  std::string method = "weighting";
  double ridge = 0.0;  // epsilon added to the diagonal, 0 when not needed
  std::vector<std::string> warnings;
};

// Averages per-source estimates and forms cov = M - mu mu'. Applies a ridge
// eps * I, eps = 1e-8 * trace / (p-1), when the condition number exceeds 1e12.
ReconstructedMoments average_reconstructions(
    std::span<const SourceMoments> per_source,
    SourceAveraging averaging = SourceAveraging::kUnweighted);

// Fits each source to the target's reported moments and averages the
// weighted moments. Sources whose fit fails are skipped with a warning.
ReconstructedMoments reconstruct_covariance(
    const AggregatedTrial& target, std::span<const IpdTrial> sources,
    const BasisSpec& model, const BasisSpec& moments,
    const SolverOptions& options = {},
    SourceAveraging averaging = SourceAveraging::kUnweighted);

// Baseline: the average source correlation matrix rescaled by the target's
// reported standard deviations. Assumes equal correlation across
// populations.
ReconstructedMoments correlation_extrapolation(const AggregatedTrial& target,
                                               std::span<const IpdTrial> sources);

double min_eigenvalue(const Matrix& symmetric);

nlohmann::json to_json(const ReconstructedMoments& moments);
ReconstructedMoments reconstructed_from_json(const nlohmann::json& doc);

}  // namespace causalmeta
