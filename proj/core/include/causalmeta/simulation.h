#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/data_model.h"
#include "causalmeta/meta_model.h"

namespace causalmeta {

// Three-trial transport design with covariates L1 ~ U(0,1), L2 ~ Bern(1/2)
// and randomized X ~ Bern(1/2). Setting 2 adds -3 L1^2 to the linear
// predictors of trials 2 and 3 in the trial-membership model, so a
// main-effects weight model is misspecified.
struct TransportDesign {
  int setting = 1;

  // P(S = s | L) for s = 1, 2, 3.
  std::array<double, 3> membership(double l1, double l2) const;
  // P(Y = 1 | X = x, L, S = s).
  static double outcome_risk(int s, int x, double l1, double l2);
};

// n participants split by trial; studies are returned in order 1, 2, 3.
std::vector<IpdTrial> dgp_transport(int setting, Index n, std::uint64_t seed);

// theta(j, k) on the risk-difference scale: the effect of trial k's outcome
// model averaged over the case mix of population j, from `draws` covariate
// profiles weighted by P(S = j | L). Results are cached per (setting, seed,
// draws).
struct TransportTruth {
  std::array<std::array<double, 3>, 3> theta{};  // [j-1][k-1]
  std::array<std::array<double, 3>, 3> mc_se{};
  Index draws = 0;
};
const TransportTruth& oracle_truth_table(int setting, Index draws = 10'000'000,
                                         std::uint64_t seed = 20240601);
double oracle_truth(int setting, int j, int k, Index draws = 10'000'000,
                    std::uint64_t seed = 20240601);

struct TransportSimConfig {
  int setting = 1;
  Index n = 2000;
  int replicates = 1000;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  Index truth_draws = 10'000'000;
  // Use the true membership-probability ratio instead of fitted weights;
  // only bias is meaningful in this mode.
  bool oracle_weights = false;
};

struct SimRow {
  std::string setting;
  std::string parameter;
  Index n = 0;
  double truth = 0.0;
  double bias = 0.0;
  double empirical_variance = 0.0;  // divisor R, so mse = bias^2 + variance
  double median_variance_estimate = 0.0;
  double mse = 0.0;
  double coverage = 0.0;  // percent
  double coverage_mcse = 0.0;
  int replicates = 0;
  int failed = 0;
};

struct TransportReplicate {
  bool ok = false;
  std::string error;
  std::array<double, 2> estimate{};  // theta(1,2), theta(1,3)
  std::array<double, 2> variance{};
};

struct SimReport {
  std::vector<SimRow> rows;
  std::vector<TransportReplicate> replicates;
  double runtime_seconds = 0.0;
  std::uint64_t seed = 0;
};

// One replicate: hide trial 1's participant data, fit main-effects weights
// for trials 2 and 3, reconstruct cov(L | S = 1), and form sandwich
// variances for theta(1, 2) and theta(1, 3).
TransportReplicate run_transport_replicate(const TransportSimConfig& config, int r);
SimReport run_transport_sim(const TransportSimConfig& config);

// Residual covariance of the q^2 cells indexed (j-1) q + (k-1): an orthogonal
// factor from the QR decomposition of an N(0.5, 0.2^2) matrix, eigenvalues
// 0, 0.005, ... in reversed order, cells with j != j' and k != k' set to
// zero, and the whole matrix divided by 9.9.
Matrix gen_residual_cov(int q, std::uint64_t seed);

struct MetaSimConfig {
  int q = 20;
  int z = 10;
  int replicates = 200;
  std::uint64_t seed = 1;
  std::uint64_t sigma_seed = 1;
  double theta = 0.0;
  double omega2 = 0.5;
  double xi2 = 0.5;
  MetaOptions options;
  unsigned threads = 1;
};

struct MetaReplicate {
  bool ok = false;
  std::string error;
  double theta = 0.0;  // posterior medians
  double omega2 = 0.0;
  double tau2 = 0.0;
  double xi2 = 0.0;
  double rhat_theta = 1.0;
  bool divergent = false;
};

struct MetaSimReport {
  MetaSimConfig config;
  std::vector<MetaReplicate> replicates;
  // Medians and interquartile ranges of the posterior medians, in the order
  // theta, omega2, tau2, xi2.
  std::array<double, 4> median_of_medians{};
  std::array<double, 4> iqr{};
  int failed = 0;
  int divergent = 0;
  double runtime_seconds = 0.0;
};

// Full q^2 effect vector from the two-random-effect model.
Vector draw_meta_effects(int q, double theta, double omega2, double xi2,
                         const Eigen::LLT<Matrix>& sigma_factor, std::uint64_t seed);

MetaSimReport run_meta_sim(const MetaSimConfig& config);

// Setting,Parameter,n,Bias,var,var_hat_median,MSE,Coverage,... one row per
// parameter.
void write_report_csv(std::ostream& out, const SimReport& report);
void write_meta_sim_csv(std::ostream& out, const MetaSimReport& report);
nlohmann::json to_json(const SimReport& report);
nlohmann::json to_json(const MetaSimReport& report);

}  // namespace causalmeta
