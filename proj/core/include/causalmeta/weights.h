#pragma once

#include <optional>

#include <nlohmann/json.hpp>

#include "causalmeta/basis.h"
#include "causalmeta/data_model.h"
#include "causalmeta/types.h"

namespace causalmeta {

// Target-population means of the moment basis.
struct MomentTargets {
  int target_study = 0;
  Vector basis_means;
};

// Uses pooled first and raw second moments. Interactions need cross moments
// that aggregated reports do not carry.
MomentTargets target_from_aggregated(const AggregatedTrial& trial,
                                     const BasisSpec& moments);
MomentTargets target_from_ipd(const IpdTrial& trial, const BasisSpec& moments);

struct SolverOptions {
  double grad_tol = 1e-8;
  int max_iter = 200;
  // Iterates beyond this norm are treated as diverging (no overlap).
  double divergence_norm = 50.0;
};

// Fitted density-ratio model exp(beta' psi(L)) for source trial k
// transported to target population j.
struct PropensityRatioFit {
  int source = 0;
  int target = 0;
  BasisSpec model;    // psi: linear predictor of the ratio model
  BasisSpec moments;  // phi: matched moment functions
  Vector beta;
  // exp(beta' psi(L_i)); averages to one over the source when the constant
  // moment is matched.
  Vector raw_weights;
  // raw_weights, or the capped copy after truncate_weights.
  Vector weights;
  // weights / sum(weights)
  Vector normalized;
  std::optional<double> truncation_cap;
  double truncation_percentile = 1.0;
  bool converged = false;
  double objective = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;

  bool is_identity() const { return source == target; }
};

// Raised when the iteration budget runs out; carries the last iterate.
class SolverError : public NumericalError {
 public:
  SolverError(const std::string& what, Vector last_beta)
      : NumericalError(what), last_beta_(std::move(last_beta)) {}
  const Vector& last_beta() const { return last_beta_; }

 private:
  Vector last_beta_;
};

// f(beta) = || n^-1 sum_i phi(L_i) exp(beta' psi(L_i)) - target ||^2 with
// analytic gradient and Hessian.
class MomentObjective {
 public:
  MomentObjective(Matrix model_design, Matrix moment_design, Vector target);

  Index num_params() const { return model_design_.cols(); }
  Index num_moments() const { return moment_design_.cols(); }

  Vector weights(const Vector& beta) const;
  Vector residual(const Vector& beta) const;
  // d residual / d beta, num_moments x num_params.
  Matrix jacobian(const Vector& beta) const;
  double value(const Vector& beta) const;
  Vector gradient(const Vector& beta) const;
  Matrix hessian(const Vector& beta) const;

 private:
  Matrix model_design_;
  Matrix moment_design_;
  Vector target_;
};

// Damped Newton from beta = 0 with a Levenberg-Marquardt fallback when the
// Hessian is not positive definite or the line search stalls.
// Throws InfeasibleError on non-overlap and SolverError on non-convergence.
PropensityRatioFit solve_weights(const IpdTrial& source,
                                 const MomentTargets& targets,
                                 const BasisSpec& model,
                                 const BasisSpec& moments,
                                 const SolverOptions& options = {});

inline PropensityRatioFit solve_weights(const IpdTrial& source,
                                        const MomentTargets& targets,
                                        const BasisSpec& spec,
                                        const SolverOptions& options = {}) {
  return solve_weights(source, targets, spec, spec, options);
}

// Uniform weights for standardizing a trial to its own population.
PropensityRatioFit identity_fit(const IpdTrial& source, const BasisSpec& model,
                                const BasisSpec& moments);

// Caps weights at the given sample percentile (order statistic). The
// untruncated weights stay in raw_weights.
PropensityRatioFit truncate_weights(const PropensityRatioFit& fit,
                                    double percentile);

struct StandardizedEffect {
  int target = 0;
  int source = 0;
  EffectScale scale = EffectScale::kRiskDifference;
  double estimate = 0.0;
  double risk_treated = 0.0;
  double risk_control = 0.0;
};

// Self-normalized (Hajek) arm risks under the fit's weights.
StandardizedEffect standardize_effect(const IpdTrial& source,
                                      const PropensityRatioFit& fit,
                                      EffectScale scale);

// Horvitz-Thompson contrast n_k^-1 sum_i w_i Y_i [X_i / r_1 - (1 - X_i) / r_0]
// on the risk-difference scale.
double horvitz_thompson_difference(const IpdTrial& source,
                                   const PropensityRatioFit& fit, double r1);

struct WeightsSummary {
  double min = 0.0;
  double max = 0.0;
  double p95 = 0.0;
  double ess = 0.0;  // (sum w)^2 / sum w^2
};

WeightsSummary summarize_weights(const Vector& weights);
nlohmann::json to_json(const PropensityRatioFit& fit);

}  // namespace causalmeta
