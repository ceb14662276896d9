#include "causalmeta/covariance_reconstruction.h"

#include <cmath>

#include "causalmeta/json_util.h"

namespace causalmeta {

namespace {

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

double min_eigenvalue(const Matrix& symmetric) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(symmetric), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

SourceMoments second_moment_from_source(const IpdTrial& source,
                                        const PropensityRatioFit& fit) {
  if (!fit.converged) {
    throw NumericalError("weight fit for target " + std::to_string(fit.target) +
                         " from source " + std::to_string(fit.source) +
                         " did not converge");
  }
  if (fit.raw_weights.size() != source.size()) {
    throw ValidationError("weight vector does not match the source trial");
  }
  const Vector w = fit.raw_weights / fit.raw_weights.sum();
  SourceMoments out;
  out.source = fit.source;
  out.target = fit.target;
  out.source_size = static_cast<double>(source.size());
  out.mean = source.covariates.transpose() * w;
  out.raw2 = symmetrize(source.covariates.transpose() * w.asDiagonal() *
                        source.covariates);
  return out;
}

ReconstructedMoments average_reconstructions(
    std::span<const SourceMoments> per_source, SourceAveraging averaging) {
  if (per_source.empty()) {
    throw ValidationError("covariance reconstruction needs at least one source");
  }
  const Index p = per_source.front().mean.size();
  ReconstructedMoments out;
  out.target = per_source.front().target;
  out.mean = Vector::Zero(p);
  out.second_moment = Matrix::Zero(p, p);
  double total = 0.0;
  for (const auto& s : per_source) {
    if (s.mean.size() != p || s.raw2.rows() != p || s.raw2.cols() != p) {
      throw ValidationError("source moments have inconsistent dimensions");
    }
    const double weight =
        averaging == SourceAveraging::kSampleSize ? s.source_size : 1.0;
    out.mean += weight * s.mean;
    out.second_moment += weight * s.raw2;
    total += weight;
    out.sources.push_back(s.source);
  }
  out.mean /= total;
  out.second_moment /= total;
  out.covariance = symmetrize(out.second_moment - out.mean * out.mean.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> es(out.covariance, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (p > 0 && (lo <= 0.0 || hi / lo > 1e12)) {
    out.ridge = 1e-8 * out.covariance.trace() / static_cast<double>(p);
    if (out.ridge <= 0.0) out.ridge = 1e-12;
    out.covariance += out.ridge * Matrix::Identity(p, p);
    out.second_moment = out.covariance + out.mean * out.mean.transpose();
    out.warnings.push_back("near-singular reconstructed covariance; ridge " +
                           std::to_string(out.ridge) + " added to the diagonal");
  }
  return out;
}

ReconstructedMoments reconstruct_covariance(const AggregatedTrial& target,
                                            std::span<const IpdTrial> sources,
                                            const BasisSpec& model,
                                            const BasisSpec& moments,
                                            const SolverOptions& options,
                                            SourceAveraging averaging) {
  const auto targets = target_from_aggregated(target, moments);
  std::vector<SourceMoments> per_source;
  std::vector<std::string> warnings;
  for (const auto& src : sources) {
    try {
      const auto fit = solve_weights(src, targets, model, moments, options);
      per_source.push_back(second_moment_from_source(src, fit));
    } catch (const InfeasibleError& e) {
      warnings.push_back("source " + std::to_string(src.study_id) + " skipped: " + e.what());
    } catch (const NumericalError& e) {
      warnings.push_back("source " + std::to_string(src.study_id) + " skipped: " + e.what());
    }
  }
  if (per_source.empty()) {
    throw InfeasibleError("no source trial could be weighted to study " +
                          std::to_string(target.study_id));
  }
  auto out = average_reconstructions(per_source, averaging);
  out.target = target.study_id;
  out.warnings.insert(out.warnings.begin(), warnings.begin(), warnings.end());
  return out;
}

ReconstructedMoments correlation_extrapolation(const AggregatedTrial& target,
                                               std::span<const IpdTrial> sources) {
  if (sources.empty()) {
    throw ValidationError("correlation extrapolation needs at least one source");
  }
  const auto pooled = pool_arm_moments(target);
  const Index p = pooled.mean.size();
  Vector sd(p);
  for (Index c = 0; c < p; ++c) {
    const double var = pooled.raw2[c] - pooled.mean[c] * pooled.mean[c];
    if (!(var > 0.0)) {
      throw ValidationError("correlation extrapolation: target covariate l" +
                            std::to_string(c + 1) + " has zero variance");
    }
    sd[c] = std::sqrt(var);
  }
  Matrix corr = Matrix::Zero(p, p);
  ReconstructedMoments out;
  for (const auto& src : sources) {
    const Matrix centered = src.covariates.rowwise() - src.covariates.colwise().mean();
    const Matrix cov = centered.transpose() * centered / static_cast<double>(src.size());
    const Vector inv_sd = cov.diagonal().cwiseSqrt().cwiseInverse();
    if (!inv_sd.allFinite()) {
      throw ValidationError("correlation extrapolation: source " +
                            std::to_string(src.study_id) +
                            " has a constant covariate");
    }
    corr += inv_sd.asDiagonal() * cov * inv_sd.asDiagonal();
    out.sources.push_back(src.study_id);
  }
  corr /= static_cast<double>(sources.size());
  corr.diagonal().setOnes();
  out.target = target.study_id;
  out.method = "correlation_extrapolation";
  out.mean = pooled.mean;
  out.covariance = symmetrize(sd.asDiagonal() * corr * sd.asDiagonal());
  out.second_moment = out.covariance + out.mean * out.mean.transpose();
  out.warnings.push_back("assumes equal covariate correlation across populations");
  return out;
}

nlohmann::json to_json(const ReconstructedMoments& m) {
  return {{"target", m.target},
          {"mu", vector_to_json(m.mean)},
          {"cov", matrix_to_json(m.covariance)},
          {"method", m.method},
          {"sources", m.sources},
          {"ridge", m.ridge},
          {"min_eig", min_eigenvalue(m.covariance)},
          {"warnings", m.warnings}};
}

ReconstructedMoments reconstructed_from_json(const nlohmann::json& doc) {
  ReconstructedMoments m;
  try {
    m.target = doc.at("target").get<int>();
    m.mean = vector_from_json(doc.at("mu"));
    m.covariance = matrix_from_json(doc.at("cov"));
    m.method = doc.at("method").get<std::string>();
    m.sources = doc.at("sources").get<std::vector<int>>();
    m.ridge = doc.value("ridge", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("reconstructed moments: ") + e.what());
  }
  if (m.covariance.rows() != m.mean.size() || m.covariance.cols() != m.mean.size()) {
    throw ValidationError("reconstructed moments: mu and cov dimensions differ");
  }
  m.second_moment = m.covariance + m.mean * m.mean.transpose();
  return m;
}

}  // namespace causalmeta
