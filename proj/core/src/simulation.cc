#include "causalmeta/simulation.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <tuple>

#include "causalmeta/basis.h"
#include "causalmeta/covariance_reconstruction.h"
#include "causalmeta/sandwich.h"
#include "causalmeta/weights.h"

namespace causalmeta {

namespace {

double expit(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string parameter_name(int j, int k) {
  return "theta(" + std::to_string(j) + "," + std::to_string(k) + ")";
}

}  // namespace

std::array<double, 3> TransportDesign::membership(double l1, double l2) const {
  double e2 = 1.0 - l1 - l2;
  double e3 = -1.0 + l1 + l2;
  if (setting == 2) {
    e2 -= 3.0 * l1 * l1;
    e3 -= 3.0 * l1 * l1;
  }
  const double a2 = std::exp(e2);
  const double a3 = std::exp(e3);
  const double total = 1.0 + a2 + a3;
  return {1.0 / total, a2 / total, a3 / total};
}

double TransportDesign::outcome_risk(int s, int x, double l1, double l2) {
  static constexpr std::array<double, 3> kTreatment{1.75, 0.5, -0.25};
  const double coef = kTreatment[static_cast<std::size_t>(s - 1)];
  return expit(-0.25 + coef * x - l2 + l1 - 2.0 * x * l2 + 2.0 * x * l1);
}

std::vector<IpdTrial> dgp_transport(int setting, Index n, std::uint64_t seed) {
  if (setting != 1 && setting != 2) {
    throw ValidationError("transport setting must be 1 or 2");
  }
  if (n < 1) throw ValidationError("sample size must be positive");
  const TransportDesign design{setting};
  auto engine = make_engine(seed, {0x647670ULL});
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::array<std::vector<std::array<double, 4>>, 3> rows;  // l1, l2, x, y
  for (Index i = 0; i < n; ++i) {
    const double l1 = unif(engine);
    const double l2 = unif(engine) < 0.5 ? 1.0 : 0.0;
    const int x = unif(engine) < 0.5 ? 1 : 0;
    const auto p = design.membership(l1, l2);
    const double u = unif(engine);
    const int s = u < p[0] ? 1 : (u < p[0] + p[1] ? 2 : 3);
    const int y = unif(engine) < TransportDesign::outcome_risk(s, x, l1, l2) ? 1 : 0;
    rows[static_cast<std::size_t>(s - 1)].push_back({l1, l2, double(x), double(y)});
  }
  std::vector<IpdTrial> out(3);
  for (int s = 0; s < 3; ++s) {
    const auto& r = rows[static_cast<std::size_t>(s)];
    auto& t = out[static_cast<std::size_t>(s)];
    const auto m = static_cast<Index>(r.size());
    t.study_id = s + 1;
    t.covariates.resize(m, 2);
    t.treatment.resize(m);
    t.outcome.resize(m);
    for (Index i = 0; i < m; ++i) {
      const auto& row = r[static_cast<std::size_t>(i)];
      t.covariates(i, 0) = row[0];
      t.covariates(i, 1) = row[1];
      t.treatment[i] = static_cast<int>(row[2]);
      t.outcome[i] = static_cast<int>(row[3]);
    }
  }
  return out;
}

const TransportTruth& oracle_truth_table(int setting, Index draws, std::uint64_t seed) {
  if (setting != 1 && setting != 2) {
    throw ValidationError("transport setting must be 1 or 2");
  }
  if (draws < 2) throw ValidationError("oracle needs at least two draws");
  static std::mutex mutex;
  static std::map<std::tuple<int, Index, std::uint64_t>, TransportTruth> cache;
  const std::lock_guard lock(mutex);
  const auto key = std::make_tuple(setting, draws, seed);
  if (const auto it = cache.find(key); it != cache.end()) return it->second;

  // Rao-Blackwellized over S: every covariate draw contributes to every
  // population with weight P(S = j | L).
  const TransportDesign design{setting};
  auto engine = make_engine(seed, {0x6f7261636c65ULL, static_cast<std::uint64_t>(setting)});
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::array<double, 3> wsum{};
  std::array<std::array<double, 3>, 3> sum{};
  std::array<std::array<double, 3>, 3> sum2{};
  std::array<std::array<double, 3>, 3> cross{};
  std::array<double, 3> w2sum{};
  for (Index i = 0; i < draws; ++i) {
    const double l1 = unif(engine);
    const double l2 = unif(engine) < 0.5 ? 1.0 : 0.0;
    const auto p = design.membership(l1, l2);
    std::array<double, 3> diff{};
    for (int k = 1; k <= 3; ++k) {
      diff[static_cast<std::size_t>(k - 1)] = TransportDesign::outcome_risk(k, 1, l1, l2) -
                                              TransportDesign::outcome_risk(k, 0, l1, l2);
    }
    for (std::size_t j = 0; j < 3; ++j) {
      wsum[j] += p[j];
      w2sum[j] += p[j] * p[j];
      for (std::size_t k = 0; k < 3; ++k) {
        sum[j][k] += p[j] * diff[k];
        sum2[j][k] += p[j] * p[j] * diff[k] * diff[k];
        cross[j][k] += p[j] * p[j] * diff[k];
      }
    }
  }
  TransportTruth t;
  t.draws = draws;
  const double nd = static_cast<double>(draws);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double theta = sum[j][k] / wsum[j];
      t.theta[j][k] = theta;
      // Delta-method variance of a ratio estimator.
      const double resid2 = sum2[j][k] - 2.0 * theta * cross[j][k] + theta * theta * w2sum[j];
      const double wbar = wsum[j] / nd;
      t.mc_se[j][k] = std::sqrt(std::max(0.0, resid2 / nd)) / (wbar * std::sqrt(nd));
    }
  }
  return cache.emplace(key, t).first->second;
}

double oracle_truth(int setting, int j, int k, Index draws, std::uint64_t seed) {
  if (j < 1 || j > 3 || k < 1 || k > 3) {
    throw ValidationError("oracle indices must lie in 1..3");
  }
  return oracle_truth_table(setting, draws, seed)
      .theta[static_cast<std::size_t>(j - 1)][static_cast<std::size_t>(k - 1)];
}

TransportReplicate run_transport_replicate(const TransportSimConfig& config, int r) {
  TransportReplicate rep;
  try {
    const auto trials = dgp_transport(config.setting, config.n,
                                      derive_seed(config.seed, {static_cast<std::uint64_t>(r)}));
    for (const auto& t : trials) t.validate();
    const auto hidden = summarize(trials[0], EffectScale::kRiskDifference);
    const auto basis = BasisSpec::main_effects(2);
    const auto target = target_from_aggregated(hidden, basis);

    if (config.oracle_weights) {
      const TransportDesign design{config.setting};
      for (int k = 2; k <= 3; ++k) {
        const auto& src = trials[static_cast<std::size_t>(k - 1)];
        PropensityRatioFit fit;
        fit.source = k;
        fit.target = 1;
        fit.model = basis;
        fit.moments = basis;
        fit.raw_weights.resize(src.size());
        for (Index i = 0; i < src.size(); ++i) {
          const auto p = design.membership(src.covariates(i, 0), src.covariates(i, 1));
          fit.raw_weights[i] = p[0] / p[static_cast<std::size_t>(k - 1)];
        }
        fit.weights = fit.raw_weights;
        fit.normalized = fit.weights / fit.weights.sum();
        fit.converged = true;
        const auto eff = standardize_effect(src, fit, EffectScale::kRiskDifference);
        rep.estimate[static_cast<std::size_t>(k - 2)] = eff.estimate;
        rep.variance[static_cast<std::size_t>(k - 2)] = std::numeric_limits<double>::quiet_NaN();
      }
      rep.ok = true;
      return rep;
    }

    const std::vector<IpdTrial> sources{trials[1], trials[2]};
    const auto recon = reconstruct_covariance(hidden, sources, basis, basis);
    const auto moments = target_moments_from_reconstruction(recon, hidden.size(), basis);
    const std::map<int, TargetMoments> target_moments{{1, moments}};
    for (int k = 2; k <= 3; ++k) {
      const auto& src = trials[static_cast<std::size_t>(k - 1)];
      auto fit = solve_weights(src, target, basis);
      const EstimatingStack stack(src, {StackTarget{std::move(fit), double(hidden.size())}},
                                  static_cast<double>(config.n), EffectScale::kRiskDifference);
      const auto res = sandwich(stack, target_moments);
      rep.estimate[static_cast<std::size_t>(k - 2)] = res.theta[0];
      rep.variance[static_cast<std::size_t>(k - 2)] = res.theta_covariance(0, 0);
    }
    rep.ok = true;
  } catch (const Error& e) {
    rep.ok = false;
    rep.error = e.what();
  }
  return rep;
}

SimReport run_transport_sim(const TransportSimConfig& config) {
  if (config.replicates < 1) throw ValidationError("replicates must be >= 1");
  if (config.setting != 1 && config.setting != 2) {
    throw ValidationError("transport setting must be 1 or 2");
  }
  const auto start = std::chrono::steady_clock::now();
  const auto& truth = oracle_truth_table(config.setting, config.truth_draws);
  SimReport report;
  report.seed = config.seed;
  report.replicates.resize(static_cast<std::size_t>(config.replicates));
  parallel_for(report.replicates.size(), std::max(1u, config.threads), [&](std::size_t r) {
    report.replicates[r] = run_transport_replicate(config, static_cast<int>(r));
  });

  for (int k = 2; k <= 3; ++k) {
    const auto slot = static_cast<std::size_t>(k - 2);
    const double theta = truth.theta[0][static_cast<std::size_t>(k - 1)];
    std::vector<double> est;
    std::vector<double> var;
    int covered = 0;
    int failed = 0;
    for (const auto& rep : report.replicates) {
      if (!rep.ok) {
        ++failed;
        continue;
      }
      est.push_back(rep.estimate[slot]);
      var.push_back(rep.variance[slot]);
      const double half = 1.959963984540054 * std::sqrt(rep.variance[slot]);
      if (std::abs(rep.estimate[slot] - theta) <= half) ++covered;
    }
    SimRow row;
    row.setting = "transport_" + std::to_string(config.setting) +
                  (config.oracle_weights ? "_oracle_weights" : "");
    row.parameter = parameter_name(1, k);
    row.n = config.n;
    row.truth = theta;
    row.replicates = static_cast<int>(est.size());
    row.failed = failed;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (est.empty()) {
      row.bias = row.empirical_variance = row.mse = row.median_variance_estimate = nan;
      row.coverage = row.coverage_mcse = nan;
    } else {
      const double r = static_cast<double>(est.size());
      const double m = mean(est);
      row.bias = m - theta;
      double ss = 0.0;
      double se = 0.0;
      for (const double e : est) {
        ss += (e - m) * (e - m);
        se += (e - theta) * (e - theta);
      }
      row.empirical_variance = ss / r;
      row.mse = se / r;
      if (config.oracle_weights) {
        row.median_variance_estimate = row.coverage = row.coverage_mcse = nan;
      } else {
        row.median_variance_estimate = median(var);
        const double c = covered / r;
        row.coverage = 100.0 * c;
        row.coverage_mcse = 100.0 * std::sqrt(c * (1.0 - c) / r);
      }
    }
    report.rows.push_back(row);
  }
  report.runtime_seconds = seconds_since(start);
  return report;
}

Matrix gen_residual_cov(int q, std::uint64_t seed) {
  if (q < 2) throw ValidationError("residual covariance needs q >= 2");
  const Index n = static_cast<Index>(q) * q;
  auto engine = make_engine(seed, {0x7369676d61ULL});
  std::normal_distribution<double> normal(0.5, 0.2);
  Matrix base(n, n);
  for (Index c = 0; c < n; ++c) {
    for (Index r = 0; r < n; ++r) base(r, c) = normal(engine);
  }
  const Eigen::HouseholderQR<Matrix> qr(base);
  const Matrix p = qr.householderQ() * Matrix::Identity(n, n);
  // a_1 = 0, a_{i+1} = a_i + 0.005, assigned largest first.
  Vector eig(n);
  for (Index i = 0; i < n; ++i) eig[i] = 0.005 * static_cast<double>(n - 1 - i);
  Matrix sigma = p * eig.asDiagonal() * p.transpose();
  for (Index a = 0; a < n; ++a) {
    for (Index b = 0; b < n; ++b) {
      const Index ja = a / q;
      const Index ka = a % q;
      const Index jb = b / q;
      const Index kb = b % q;
      if (ja != jb && ka != kb) sigma(a, b) = 0.0;
    }
  }
  sigma /= 9.9;
  return 0.5 * (sigma + sigma.transpose());
}

Vector draw_meta_effects(int q, double theta, double omega2, double xi2,
                         const Eigen::LLT<Matrix>& sigma_factor, std::uint64_t seed) {
  const Index n = static_cast<Index>(q) * q;
  auto engine = make_engine(seed, {0x6d657461ULL});
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector beta(q);
  Vector gamma(q);
  for (int j = 0; j < q; ++j) beta[j] = std::sqrt(omega2) * normal(engine);
  for (int k = 0; k < q; ++k) gamma[k] = std::sqrt(xi2) * normal(engine);
  Vector noise(n);
  for (Index i = 0; i < n; ++i) noise[i] = normal(engine);
  const Vector eps = sigma_factor.matrixL() * noise;
  Vector out(n);
  for (int j = 0; j < q; ++j) {
    for (int k = 0; k < q; ++k) {
      const Index i = static_cast<Index>(j) * q + k;
      out[i] = theta + beta[j] + gamma[k] + eps[i];
    }
  }
  return out;
}

MetaSimReport run_meta_sim(const MetaSimConfig& config) {
  if (config.replicates < 1) throw ValidationError("replicates must be >= 1");
  if (config.q < 2 || config.z < 0 || config.z >= config.q) {
    throw ValidationError("meta simulation needs q >= 2 and 0 <= z < q");
  }
  if (config.omega2 < 0.0 || config.xi2 < 0.0) {
    throw ValidationError("true variances must be non-negative");
  }
  const auto start = std::chrono::steady_clock::now();
  const Matrix sigma = gen_residual_cov(config.q, config.sigma_seed);
  const Eigen::LLT<Matrix> factor(sigma);
  if (factor.info() != Eigen::Success) {
    throw NumericalError("generated residual covariance is not positive definite");
  }
  MetaSimReport report;
  report.config = config;
  report.replicates.resize(static_cast<std::size_t>(config.replicates));
  MetaOptions options = config.options;
  options.threads = 1;
  parallel_for(report.replicates.size(), std::max(1u, config.threads), [&](std::size_t r) {
    auto& rep = report.replicates[r];
    try {
      const Vector full = draw_meta_effects(config.q, config.theta, config.omega2, config.xi2,
                                            factor, derive_seed(config.seed, {r, 0}));
      const auto table = EffectTable::from_full(config.q, config.z, full, sigma);
      const auto post = fit_submodel_mcmc(table, options, derive_seed(config.seed, {r, 1}));
      rep.theta = median(Posterior::flatten(post.theta));
      rep.omega2 = median(Posterior::flatten(post.omega2));
      rep.tau2 = median(Posterior::flatten(post.tau2));
      rep.xi2 = median(Posterior::flatten(post.xi2));
      rep.rhat_theta = post.rhat_theta;
      rep.divergent = !post.warnings.empty();
      rep.ok = true;
    } catch (const Error& e) {
      rep.ok = false;
      rep.error = e.what();
    }
  });

  std::array<std::vector<double>, 4> values;
  for (const auto& rep : report.replicates) {
    if (!rep.ok) {
      ++report.failed;
      continue;
    }
    if (rep.divergent) ++report.divergent;
    values[0].push_back(rep.theta);
    values[1].push_back(rep.omega2);
    values[2].push_back(rep.tau2);
    values[3].push_back(rep.xi2);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (values[i].empty()) {
      report.median_of_medians[i] = report.iqr[i] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    report.median_of_medians[i] = median(values[i]);
    report.iqr[i] = quantile_linear(values[i], 0.75) - quantile_linear(values[i], 0.25);
  }
  report.runtime_seconds = seconds_since(start);
  return report;
}

void write_report_csv(std::ostream& out, const SimReport& report) {
  out << "Setting,Parameter,n,Bias,var,var_hat_median,MSE,Coverage,coverage_mcse,truth,"
         "replicates,failed\n";
  out.precision(10);
  for (const auto& r : report.rows) {
    out << r.setting << ',' << r.parameter << ',' << r.n << ',' << r.bias << ','
        << r.empirical_variance << ',' << r.median_variance_estimate << ',' << r.mse << ','
        << r.coverage << ',' << r.coverage_mcse << ',' << r.truth << ',' << r.replicates
        << ',' << r.failed << '\n';
  }
}

void write_meta_sim_csv(std::ostream& out, const MetaSimReport& report) {
  out << "replicate,ok,theta,omega2,tau2,xi2,rhat_theta\n";
  out.precision(10);
  for (std::size_t r = 0; r < report.replicates.size(); ++r) {
    const auto& rep = report.replicates[r];
    out << r << ',' << (rep.ok ? 1 : 0) << ',' << rep.theta << ',' << rep.omega2 << ','
        << rep.tau2 << ',' << rep.xi2 << ',' << rep.rhat_theta << '\n';
  }
}

nlohmann::json to_json(const SimReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"setting", r.setting},
                    {"parameter", r.parameter},
                    {"n", r.n},
                    {"truth", r.truth},
                    {"bias", r.bias},
                    {"var", r.empirical_variance},
                    {"var_hat_median", r.median_variance_estimate},
                    {"mse", r.mse},
                    {"coverage", r.coverage},
                    {"coverage_mcse", r.coverage_mcse},
                    {"replicates", r.replicates},
                    {"failed", r.failed}});
  }
  return {{"rows", rows}, {"runtime_seconds", report.runtime_seconds}, {"seed", report.seed}};
}

nlohmann::json to_json(const MetaSimReport& report) {
  const auto& c = report.config;
  nlohmann::json summary = nlohmann::json::object();
  const std::array<const char*, 4> names{"theta", "omega2", "tau2", "xi2"};
  const std::array<double, 4> truth{c.theta, c.omega2, c.omega2 + c.xi2, c.xi2};
  for (std::size_t i = 0; i < 4; ++i) {
    summary[names[i]] = {{"truth", truth[i]},
                         {"median_of_medians", report.median_of_medians[i]},
                         {"iqr", report.iqr[i]}};
  }
  return {{"q", c.q},
          {"z", c.z},
          {"replicates", c.replicates},
          {"seed", c.seed},
          {"sigma_seed", c.sigma_seed},
          {"summary", summary},
          {"failed", report.failed},
          {"divergent", report.divergent},
          {"runtime_seconds", report.runtime_seconds}};
}

}  // namespace causalmeta
