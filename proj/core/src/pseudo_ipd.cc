#include "causalmeta/pseudo_ipd.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "causalmeta/json_util.h"
#include "causalmeta/stats.h"

namespace causalmeta {

namespace {

Matrix psd_sqrt(const Matrix& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (cov + cov.transpose()));
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * scale) {
    throw ValidationError("target covariance is not positive semi-definite "
                          "(min eigenvalue " +
                          std::to_string(es.eigenvalues().minCoeff()) + ")");
  }
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

MatchedMomentReport moment_report(const IpdTrial& data, const Vector& mu,
                                  const Matrix& cov) {
  MatchedMomentReport r;
  r.target_mean = mu;
  r.target_covariance = cov;
  const Vector mean = data.covariates.colwise().mean().transpose();
  const Matrix centered = data.covariates.rowwise() - mean.transpose();
  const Matrix sample_cov = centered.transpose() * centered /
                            static_cast<double>(data.size());
  r.mean_error = (mean - mu).cwiseAbs().maxCoeff();
  r.covariance_error = (sample_cov - cov).norm();
  return r;
}

}  // namespace

Matrix generate_covariates(Index n, const Vector& mu, const Matrix& cov,
                           std::uint64_t seed) {
  const Index p = mu.size();
  if (cov.rows() != p || cov.cols() != p) {
    throw ValidationError("covariance dimension does not match the mean");
  }
  if (n <= p) {
    throw ValidationError(
        "exact covariance matching needs more than " + std::to_string(p) +
        " rows (got " + std::to_string(n) + "); fall back to mean-only matching");
  }
  const Matrix root = psd_sqrt(cov);
  auto engine = make_engine(seed, {0x70736575646fULL});
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix base(n, p);
  for (Index c = 0; c < p; ++c) {
    for (Index i = 0; i < n; ++i) base(i, c) = normal(engine);
  }
  base.rowwise() -= base.colwise().mean();
  const Matrix sample_cov = base.transpose() * base / static_cast<double>(n);
  Eigen::LLT<Matrix> llt(sample_cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("base sample is rank deficient; try another seed");
  }
  // base * L^-T has identity sample covariance.
  Matrix white = llt.matrixL().solve(base.transpose()).transpose();
  white.rowwise() -= white.colwise().mean();
  Matrix out = white * root;
  out.rowwise() += mu.transpose();
  return out;
}

PseudoTrial assign_arms_outcomes(const AggregatedTrial& trial,
                                 const Matrix& covariates, std::uint64_t seed) {
  const Index n = trial.size();
  if (covariates.rows() != n) {
    throw ValidationError("pseudo covariates have " + std::to_string(covariates.rows()) +
                          " rows but arm sizes sum to " + std::to_string(n));
  }
  auto engine = make_engine(seed, {0x61726d73ULL});
  PseudoTrial out;
  out.data.study_id = trial.study_id;
  out.data.covariates = covariates;
  out.data.treatment = IntVector::Zero(n);
  out.data.outcome = IntVector::Zero(n);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), engine);
  const auto n1 = static_cast<std::size_t>(trial.arms[1].n);
  for (std::size_t i = 0; i < n1; ++i) out.data.treatment[order[i]] = 1;

  for (int x = 0; x < 2; ++x) {
    std::vector<Index> arm;
    for (Index i = 0; i < n; ++i) {
      if (out.data.treatment[i] == x) arm.push_back(i);
    }
    std::shuffle(arm.begin(), arm.end(), engine);
    const double target = arm.size() * trial.arms[static_cast<std::size_t>(x)].mean_y;
    // nearbyint honours the default round-to-nearest-even mode.
    const auto count = static_cast<std::size_t>(std::nearbyint(target));
    for (std::size_t i = 0; i < count && i < arm.size(); ++i) out.data.outcome[arm[i]] = 1;
    out.report.successes[static_cast<std::size_t>(x)] = static_cast<int>(count);
    out.report.rounding_residual[static_cast<std::size_t>(x)] =
        target - static_cast<double>(count);
  }
  const Vector mean = covariates.colwise().mean().transpose();
  const Matrix centered = covariates.rowwise() - mean.transpose();
  const auto partial = moment_report(out.data, mean,
                                     centered.transpose() * centered / static_cast<double>(n));
  out.report.target_mean = partial.target_mean;
  out.report.target_covariance = partial.target_covariance;
  return out;
}

Matrix pseudo_target_covariance(const AggregatedTrial& trial,
                                const ReconstructedMoments& reconstructed,
                                std::vector<std::string>& warnings) {
  const auto pooled = pool_arm_moments(trial);
  Matrix cov = reconstructed.covariance;
  Matrix candidate = cov;
  for (Index c = 0; c < cov.rows(); ++c) {
    const double reported = pooled.raw2[c] - pooled.mean[c] * pooled.mean[c];
    const double rebuilt = cov(c, c);
    const double rel = std::abs(reported - rebuilt) / std::max(std::abs(rebuilt), 1e-300);
    if (rel > 0.05) {
      warnings.push_back("study " + std::to_string(trial.study_id) + " covariate l" +
                         std::to_string(c + 1) + ": reported variance " +
                         std::to_string(reported) + " differs from the reconstruction " +
                         std::to_string(rebuilt) + " by more than 5%; keeping the reconstruction");
    } else {
      candidate(c, c) = reported;
    }
  }
  if (min_eigenvalue(candidate) < 0.0) {
    warnings.push_back("study " + std::to_string(trial.study_id) +
                       ": reported variances break positive definiteness; "
                       "using the reconstructed covariance");
    return cov;
  }
  return candidate;
}

PseudoTrial make_pseudo_trial(const AggregatedTrial& trial,
                              const ReconstructedMoments& reconstructed,
                              std::uint64_t seed) {
  if (reconstructed.mean.size() != trial.num_covariates()) {
    throw ValidationError("reconstructed moments do not match study " +
                          std::to_string(trial.study_id));
  }
  std::vector<std::string> warnings;
  const Matrix cov = pseudo_target_covariance(trial, reconstructed, warnings);
  const Matrix rows = generate_covariates(trial.size(), reconstructed.mean, cov,
                                          derive_seed(seed, {1}));
  auto out = assign_arms_outcomes(trial, rows, derive_seed(seed, {2}));
  const auto report = moment_report(out.data, reconstructed.mean, cov);
  out.report.target_mean = report.target_mean;
  out.report.target_covariance = report.target_covariance;
  out.report.mean_error = report.mean_error;
  out.report.covariance_error = report.covariance_error;
  out.warnings = std::move(warnings);
  return out;
}

nlohmann::json to_json(const PseudoTrial& pseudo) {
  const auto& r = pseudo.report;
  return {{"study_id", pseudo.data.study_id},
          {"provenance", "pseudo"},
          {"n", pseudo.data.size()},
          {"target_mean", vector_to_json(r.target_mean)},
          {"target_cov", matrix_to_json(r.target_covariance)},
          {"mean_error", r.mean_error},
          {"cov_error_frobenius", r.covariance_error},
          {"successes", {r.successes[0], r.successes[1]}},
          {"rounding_residual", {r.rounding_residual[0], r.rounding_residual[1]}},
          {"warnings", pseudo.warnings}};
}

}  // namespace causalmeta
