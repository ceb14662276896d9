#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/effect_table.h"
#include "causalmeta/stats.h"

namespace causalmeta {

// How the two lines of the submodel share data.
//   literal: every IPD diagonal theta(j,j) enters both the transported line
//            (theta_k + beta_j) and the diagonal line (theta + u_j); the two
//            lines are treated as independent blocks of the error covariance.
//   dedupe:  every cell is used once; IPD diagonals only in the first line,
//            with the full error covariance.
enum class DiagonalUse { kLiteral, kDedupe };

// Random-effect structure of the diagonal line.
//   independent: theta + u_j, u_j ~ N(0, tau^2) independent of beta_j.
//   shared_beta: theta + beta_j + gamma_j, gamma_j ~ N(0, xi^2); tau^2 is
//                derived as omega^2 + xi^2.
enum class DiagonalEffect { kIndependent, kSharedBeta };

struct MetaPriors {
  double location_variance = 1000.0;  // theta, theta_k ~ N(0, .)
  double variance_upper = 100.0;      // variances ~ U(0, .)
};

struct McmcSettings {
  int chains = 2;
  int adapt = 10000;   // discarded
  int samples = 1000;  // kept per chain
  int thin = 5;
  double initial_variance = 0.1;
  double slice_width = 1.0;
};

struct MetaOptions {
  DiagonalUse diagonal_use = DiagonalUse::kLiteral;
  DiagonalEffect diagonal_effect = DiagonalEffect::kIndependent;
  MetaPriors priors;
  McmcSettings mcmc;
  // Holds a variance at a known value; zero removes the random effect.
  std::optional<double> fixed_omega2;
  std::optional<double> fixed_tau2;  // xi^2 under shared_beta
  unsigned threads = 1;
  double rhat_warning = 1.2;
};

// Kept draws, one vector per chain, per parameter.
struct Posterior {
  int q = 0;
  int z = 0;
  std::vector<std::vector<double>> theta;
  std::vector<std::vector<std::vector<double>>> theta_k;  // [k - z - 1][chain]
  std::vector<std::vector<std::vector<double>>> beta;     // [j - 1][chain]
  std::vector<std::vector<double>> omega2;
  std::vector<std::vector<double>> tau2;
  std::vector<std::vector<double>> xi2;  // max(0, tau2 - omega2) per draw
  McmcSettings mcmc;
  std::uint64_t seed = 0;
  double rhat_theta = 1.0;
  std::vector<std::string> warnings;

  static std::vector<double> flatten(const std::vector<std::vector<double>>& chains);
};

Posterior fit_submodel_mcmc(const EffectTable& table, const MetaOptions& options,
                            std::uint64_t seed);

// Per-draw max(0, tau^2 - omega^2).
std::vector<double> derive_xi(const std::vector<double>& tau2,
                              const std::vector<double>& omega2);
Summary xi_summary(const Posterior& posterior);

// Median and 95% interval of theta + beta_j draws.
Summary population_summary(const Posterior& posterior, int j);

struct RemlFit {
  double theta = 0.0;
  double theta_se = 0.0;
  std::vector<double> theta_k;  // k = z+1..q
  double omega2 = 0.0;
  double tau2 = 0.0;  // xi^2 under shared_beta is tau2 - omega2
  double xi2 = 0.0;
  std::vector<double> beta;  // BLUPs, j = 1..q
  int iterations = 0;
  double log_likelihood = 0.0;
};

// Restricted maximum likelihood by Fisher scoring with variances clamped at
// zero; BLUPs of beta_j. Throws NumericalError on non-convergence.
RemlFit fit_submodel_reml(const EffectTable& table, const MetaOptions& options = {});

nlohmann::json to_json(const Posterior& posterior);
nlohmann::json to_json(const RemlFit& fit);
// Long format: chain,iter,param,value.
void write_draws_csv(std::ostream& out, const Posterior& posterior);

DiagonalUse parse_diagonal_use(const std::string& name);
DiagonalEffect parse_diagonal_effect(const std::string& name);

}  // namespace causalmeta
