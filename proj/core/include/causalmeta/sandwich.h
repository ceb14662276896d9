#pragma once

#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/covariance_reconstruction.h"
#include "causalmeta/data_model.h"
#include "causalmeta/effect_table.h"
#include "causalmeta/weights.h"

namespace causalmeta {

// E{phi(L) phi(L)' | S = j} together with the trial size n_j. This is the
// only target-side quantity the meat needs.
struct TargetMoments {
  int study = 0;
  double size = 0.0;
  Matrix basis_second_moment;
};

// Sample moments of participant rows (real or pseudo).
TargetMoments target_moments_from_rows(int study, const Matrix& covariates,
                                       const BasisSpec& moments);

// From reconstructed first and second covariate moments. Products of basis
// terms above degree two are not identified from these and raise
// "insufficient aggregated data".
TargetMoments target_moments_from_reconstruction(const ReconstructedMoments& m,
                                                 double size,
                                                 const BasisSpec& moments);

// One target population in a source's stack.
struct StackTarget {
  PropensityRatioFit fit;  // identity fit when target == source
  double target_size = 0.0;
};

// Stacked estimating equations for one source trial k. For each target j
// the parameter block is
//   [beta_jk (omitted when j == k), mu1_jk, mu0_jk, theta(j,k)]
// with
//   Psi_beta  = P' [I(S=k) phi(L) m(L) - I(S=j) phi(L)]
//   Psi_mu_x  = I(S=k) I(X=x) m~(L) (Y - mu_x)
//   Psi_theta = g(mu1, mu0) - theta
// where m is the density ratio on the pooled scale (fit weights times
// n_j / n_k), m~ its truncated version and g the effect contrast. P is the
// Jacobian A = E{I(S=k) phi m psi'} at the estimate when phi is longer than
// psi, and the identity when they have equal length (same covariance, better
// conditioned). Averages run over the pooled sample of size n.
class EstimatingStack {
 public:
  EstimatingStack(const IpdTrial& source, std::vector<StackTarget> targets,
                  double pooled_size, EffectScale scale);

  int source() const { return source_.study_id; }
  Index dim() const { return dim_; }
  double pooled_size() const { return pooled_size_; }
  EffectScale scale() const { return scale_; }
  std::vector<int> targets() const;
  const Vector& estimate() const { return estimate_; }
  // Positions of theta(j, k) in the parameter vector, in target order.
  std::vector<Index> theta_indices() const;
  Vector theta() const;
  // Size of the target's beta block (0 for the identity target).
  Index beta_offset(int target) const;

  // Per-participant estimating-function rows of the source trial.
  Matrix source_rows(const Vector& params) const;
  // Rows contributed by participants of target population `target`.
  Matrix target_rows(int target, const Matrix& covariates,
                     const Vector& params) const;
  // n^-1 sum over the pooled sample, given target participants.
  Vector mean_estimating_function(
      const Vector& params, const std::map<int, Matrix>& target_covariates) const;

  // Analytic sample average of d Psi / d params.
  Matrix bread() const;
  // Closed-form block assembly: source outer products plus
  // P' (n_j / n) E{phi phi' | S=j} P for every weighted target.
  Matrix meat(const std::map<int, TargetMoments>& target_moments) const;
  // Generic path: outer products of stacked rows over source and target rows.
  Matrix meat_by_stacking(const std::map<int, Matrix>& target_covariates) const;

 private:
  struct Block {
    int target = 0;
    bool identity = false;
    PropensityRatioFit fit;
    double ratio_scale = 1.0;  // n_j / n_k
    double target_size = 0.0;
    Matrix psi;                // source design of the ratio model
    Matrix phi;                // source design of the moment basis
    Matrix jacobian;           // A = E{phi m psi'}, d x p
    Matrix projection;         // P: A when over-identified, else I
    Index offset = 0;          // start of this block in the parameter vector
    Index num_beta = 0;
  };

  Vector ratio(const Block& b, const Vector& beta) const;
  Vector truncated_ratio(const Block& b, const Vector& beta,
                         Eigen::Array<bool, Eigen::Dynamic, 1>* capped) const;
  const Block& block_for(int target) const;

  IpdTrial source_;
  std::vector<Block> blocks_;
  double pooled_size_ = 0.0;
  EffectScale scale_;
  Index dim_ = 0;
  Vector estimate_;
};

struct SandwichResult {
  int source = 0;
  std::vector<int> targets;
  Matrix bread;
  Matrix meat;
  Matrix covariance;        // full parameter covariance, already divided by n
  Vector theta;             // theta(j, k) in target order
  Matrix theta_covariance;  // block of `covariance` for theta
  double bread_condition = 0.0;  // after row/column equilibration
  double min_eigenvalue = 0.0;

  Vector variances() const { return theta_covariance.diagonal(); }
};

// cov = bread^-1 meat bread^-T / n, symmetrized. Throws NumericalError when
// the equilibrated bread is singular (condition > 1e12) or a variance is
// negative beyond
// -1e-10.
Matrix sandwich(const Matrix& bread, const Matrix& meat, double n);

SandwichResult sandwich(const EstimatingStack& stack,
                        const std::map<int, TargetMoments>& target_moments);
SandwichResult sandwich_by_stacking(const EstimatingStack& stack,
                                    const std::map<int, Matrix>& target_covariates);

nlohmann::json to_json(const SandwichResult& result);

// Effect table over all estimable cells. Within-source blocks come from the
// sandwich results; aggregated diagonals take their reported standard
// errors; different sources are independent.
EffectTable assemble_effect_covariance(int q, int z,
                                       std::span<const SandwichResult> per_source,
                                       std::span<const AggregatedTrial> aggregated);

}  // namespace causalmeta
