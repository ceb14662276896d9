#include "causalmeta/meta_model.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>

namespace causalmeta {

namespace {

// Linear mixed model y = X eta + e, e ~ N(0, Sigma_y), with eta split into
// fixed effects (theta, theta_k), beta_j and the diagonal-line effect.
struct Design {
  int q = 0;
  int z = 0;
  Vector y;
  Matrix x;
  Matrix sigma;
  Index num_fixed = 0;
  Index beta_begin = -1;  // -1 when omega^2 is fixed at zero
  Index diag_begin = -1;  // -1 when the diagonal variance is fixed at zero
  Index cols = 0;
};

Matrix submatrix(const Matrix& m, const std::vector<Index>& a,
                 const std::vector<Index>& b) {
  Matrix out(static_cast<Index>(a.size()), static_cast<Index>(b.size()));
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t c = 0; c < b.size(); ++c) {
      out(static_cast<Index>(r), static_cast<Index>(c)) = m(a[r], b[c]);
    }
  }
  return out;
}

Design build_design(const EffectTable& table, const MetaOptions& options) {
  table.validate();
  const int q = table.q;
  const int z = table.z;
  if (z >= q) {
    throw ValidationError("meta model needs at least one study with participant data");
  }
  std::vector<Index> line1;
  std::vector<Index> line2;
  for (std::size_t i = 0; i < table.entries.size(); ++i) {
    const auto& e = table.entries[i];
    if (e.k > z) line1.push_back(static_cast<Index>(i));
  }
  for (int j = 1; j <= q; ++j) {
    if (options.diagonal_use == DiagonalUse::kDedupe && j > z) continue;
    const auto at = table.find(j, j);
    if (!at) {
      throw ValidationError("effect table lacks the diagonal estimate theta(" +
                            std::to_string(j) + "," + std::to_string(j) + ")");
    }
    line2.push_back(static_cast<Index>(*at));
  }

  Design d;
  d.q = q;
  d.z = z;
  d.num_fixed = 1 + (q - z);
  Index col = d.num_fixed;
  const bool shared = options.diagonal_effect == DiagonalEffect::kSharedBeta;
  if (!(options.fixed_omega2 && *options.fixed_omega2 == 0.0)) {
    d.beta_begin = col;
    col += q;
  }
  if (!(options.fixed_tau2 && *options.fixed_tau2 == 0.0)) {
    d.diag_begin = col;
    col += q;
  }
  d.cols = col;

  const auto rows = static_cast<Index>(line1.size() + line2.size());
  d.y.resize(rows);
  d.x = Matrix::Zero(rows, d.cols);
  Index r = 0;
  for (const auto i : line1) {
    const auto& e = table.entries[static_cast<std::size_t>(i)];
    d.y[r] = e.estimate;
    d.x(r, 1 + (e.k - z - 1)) = 1.0;
    if (d.beta_begin >= 0) d.x(r, d.beta_begin + e.j - 1) = 1.0;
    ++r;
  }
  for (const auto i : line2) {
    const auto& e = table.entries[static_cast<std::size_t>(i)];
    d.y[r] = e.estimate;
    d.x(r, 0) = 1.0;
    if (d.diag_begin >= 0) d.x(r, d.diag_begin + e.j - 1) = 1.0;
    if (shared && d.beta_begin >= 0) d.x(r, d.beta_begin + e.j - 1) = 1.0;
    ++r;
  }

  std::vector<Index> all = line1;
  all.insert(all.end(), line2.begin(), line2.end());
  if (options.diagonal_use == DiagonalUse::kDedupe) {
    d.sigma = submatrix(table.sigma, all, all);
  } else {
    d.sigma = Matrix::Zero(rows, rows);
    const auto n1 = static_cast<Index>(line1.size());
    const auto n2 = static_cast<Index>(line2.size());
    d.sigma.topLeftCorner(n1, n1) = submatrix(table.sigma, line1, line1);
    d.sigma.bottomRightCorner(n2, n2) = submatrix(table.sigma, line2, line2);
  }
  return d;
}

Matrix sigma_inverse(const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("non-finite likelihood: residual covariance is singular");
  }
  return llt.solve(Matrix::Identity(sigma.rows(), sigma.cols()));
}

// Log conditional density of a variance v given m random effects with sum of
// squares ss, under a flat prior on (0, upper).
double variance_log_density(double v, double m, double ss, double upper) {
  if (!(v > 0.0) || v >= upper) return -std::numeric_limits<double>::infinity();
  return -0.5 * m * std::log(v) - 0.5 * ss / v;
}

// Univariate slice sampler with stepping out and shrinkage.
template <class LogDensity>
double slice_sample(double x0, double width, const LogDensity& logf,
                    std::mt19937_64& engine) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  const double level = logf(x0) - expo(engine);
  double left = x0 - width * unif(engine);
  double right = left + width;
  for (int step = 0; step < 100 && logf(left) > level; ++step) left -= width;
  for (int step = 0; step < 100 && logf(right) > level; ++step) right += width;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double x1 = left + (right - left) * unif(engine);
    if (logf(x1) > level) return x1;
    if (x1 < x0) {
      left = x1;
    } else {
      right = x1;
    }
  }
  return x0;
}

struct ChainDraws {
  std::vector<double> theta;
  std::vector<std::vector<double>> theta_k;
  std::vector<std::vector<double>> beta;
  std::vector<double> omega2;
  std::vector<double> second;  // tau^2 (independent) or xi^2 (shared)
};

ChainDraws run_chain(const Design& d, const Matrix& xtsx, const Vector& xtsy,
                     const MetaOptions& options, std::uint64_t seed) {
  const auto& mc = options.mcmc;
  const auto& pr = options.priors;
  auto engine = make_engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int q = d.q;
  const int nk = q - d.z;

  double omega2 = options.fixed_omega2.value_or(mc.initial_variance);
  double second = options.fixed_tau2.value_or(mc.initial_variance);

  ChainDraws out;
  out.theta_k.assign(static_cast<std::size_t>(nk), {});
  out.beta.assign(static_cast<std::size_t>(q), {});
  const int total = mc.adapt + mc.samples * mc.thin;
  Matrix precision(d.cols, d.cols);
  Vector eta(d.cols);
  Vector noise(d.cols);
  for (int it = 0; it < total; ++it) {
    precision = xtsx;
    for (Index c = 0; c < d.num_fixed; ++c) precision(c, c) += 1.0 / pr.location_variance;
    if (d.beta_begin >= 0) {
      for (int j = 0; j < q; ++j) precision(d.beta_begin + j, d.beta_begin + j) += 1.0 / omega2;
    }
    if (d.diag_begin >= 0) {
      for (int j = 0; j < q; ++j) precision(d.diag_begin + j, d.diag_begin + j) += 1.0 / second;
    }
    Eigen::LLT<Matrix> llt(precision);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("posterior precision of the location parameters is not positive definite");
    }
    eta = llt.solve(xtsy);
    for (Index c = 0; c < d.cols; ++c) noise[c] = normal(engine);
    eta += llt.matrixU().solve(noise);

    if (d.beta_begin >= 0 && !options.fixed_omega2) {
      const double ss = eta.segment(d.beta_begin, q).squaredNorm();
      omega2 = slice_sample(
          omega2, mc.slice_width,
          [&](double v) { return variance_log_density(v, q, ss, pr.variance_upper); }, engine);
    }
    if (d.diag_begin >= 0 && !options.fixed_tau2) {
      const double ss = eta.segment(d.diag_begin, q).squaredNorm();
      second = slice_sample(
          second, mc.slice_width,
          [&](double v) { return variance_log_density(v, q, ss, pr.variance_upper); }, engine);
    }

    if (it >= mc.adapt && (it - mc.adapt + 1) % mc.thin == 0) {
      out.theta.push_back(eta[0]);
      for (int k = 0; k < nk; ++k) out.theta_k[static_cast<std::size_t>(k)].push_back(eta[1 + k]);
      for (int j = 0; j < q; ++j) {
        out.beta[static_cast<std::size_t>(j)].push_back(
            d.beta_begin >= 0 ? eta[d.beta_begin + j] : 0.0);
      }
      out.omega2.push_back(d.beta_begin >= 0 ? omega2 : 0.0);
      out.second.push_back(d.diag_begin >= 0 ? second : 0.0);
    }
  }
  return out;
}

nlohmann::json summary_json(const Summary& s) {
  return {{"median", s.median}, {"lower", s.lower}, {"upper", s.upper}};
}

}  // namespace

std::vector<double> Posterior::flatten(const std::vector<std::vector<double>>& chains) {
  std::vector<double> out;
  for (const auto& c : chains) out.insert(out.end(), c.begin(), c.end());
  return out;
}

Posterior fit_submodel_mcmc(const EffectTable& table, const MetaOptions& options,
                            std::uint64_t seed) {
  const auto& mc = options.mcmc;
  if (mc.chains < 1 || mc.samples < 1 || mc.thin < 1 || mc.adapt < 0) {
    throw ValidationError("MCMC settings need chains, samples, thin >= 1 and adapt >= 0");
  }
  if (!(options.priors.location_variance > 0.0) || !(options.priors.variance_upper > 0.0)) {
    throw ValidationError("prior scales must be positive");
  }
  for (const auto& v : {options.fixed_omega2, options.fixed_tau2}) {
    if (v && !(*v >= 0.0 && *v < options.priors.variance_upper)) {
      throw ValidationError("fixed variances must lie in [0, prior upper bound)");
    }
  }
  if (!(mc.initial_variance > 0.0 && mc.initial_variance < options.priors.variance_upper)) {
    throw ValidationError("initial variance must lie inside the prior support");
  }
  const Design d = build_design(table, options);
  const Matrix sinv = sigma_inverse(d.sigma);
  const Matrix xtsx = d.x.transpose() * sinv * d.x;
  const Vector xtsy = d.x.transpose() * (sinv * d.y);

  std::vector<ChainDraws> chains(static_cast<std::size_t>(mc.chains));
  parallel_for(chains.size(), std::max(1u, options.threads), [&](std::size_t c) {
    chains[c] = run_chain(d, xtsx, xtsy, options, derive_seed(seed, {0x636861696eULL, c}));
  });

  Posterior p;
  p.q = table.q;
  p.z = table.z;
  p.mcmc = mc;
  p.seed = seed;
  const bool shared = options.diagonal_effect == DiagonalEffect::kSharedBeta;
  p.theta_k.assign(static_cast<std::size_t>(table.q - table.z), {});
  p.beta.assign(static_cast<std::size_t>(table.q), {});
  for (auto& c : chains) {
    p.theta.push_back(std::move(c.theta));
    for (std::size_t k = 0; k < c.theta_k.size(); ++k) p.theta_k[k].push_back(std::move(c.theta_k[k]));
    for (std::size_t j = 0; j < c.beta.size(); ++j) p.beta[j].push_back(std::move(c.beta[j]));
    std::vector<double> tau2 = c.second;
    if (shared) {
      for (std::size_t i = 0; i < tau2.size(); ++i) tau2[i] = c.omega2[i] + c.second[i];
    }
    p.xi2.push_back(derive_xi(tau2, c.omega2));
    p.omega2.push_back(std::move(c.omega2));
    p.tau2.push_back(std::move(tau2));
  }
  if (mc.chains >= 1 && mc.samples >= 4) {
    p.rhat_theta = split_rhat(p.theta);
    if (!(p.rhat_theta <= options.rhat_warning)) {
      p.warnings.push_back("split R-hat for theta is " + std::to_string(p.rhat_theta) +
                           " (> " + std::to_string(options.rhat_warning) +
                           "); chains may not have converged");
    }
  }
  return p;
}

std::vector<double> derive_xi(const std::vector<double>& tau2,
                              const std::vector<double>& omega2) {
  if (tau2.size() != omega2.size()) {
    throw ValidationError("tau2 and omega2 draw counts differ");
  }
  std::vector<double> out(tau2.size());
  for (std::size_t i = 0; i < tau2.size(); ++i) out[i] = std::max(0.0, tau2[i] - omega2[i]);
  return out;
}

Summary xi_summary(const Posterior& posterior) {
  return summarize_draws(Posterior::flatten(posterior.xi2));
}

Summary population_summary(const Posterior& posterior, int j) {
  if (j < 1 || j > posterior.q) {
    throw ValidationError("unknown population " + std::to_string(j) + " (q = " +
                          std::to_string(posterior.q) + ")");
  }
  const auto theta = Posterior::flatten(posterior.theta);
  const auto beta = Posterior::flatten(posterior.beta[static_cast<std::size_t>(j - 1)]);
  std::vector<double> sum(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) sum[i] = theta[i] + beta[i];
  return summarize_draws(sum);
}

RemlFit fit_submodel_reml(const EffectTable& table, const MetaOptions& options) {
  const Design d = build_design(table, options);
  const Matrix xf = d.x.leftCols(d.num_fixed);
  for (Index c = 0; c < d.num_fixed; ++c) {
    if (xf.col(c).cwiseAbs().sum() == 0.0) {
      throw ValidationError("REML: fixed effect " + std::string(c == 0 ? "theta" : "theta_k") +
                            " has no observations");
    }
  }
  const Index n = d.y.size();
  std::vector<Matrix> v_parts;
  std::vector<bool> free;
  std::vector<double> value;
  if (d.beta_begin >= 0) {
    const Matrix z = d.x.middleCols(d.beta_begin, d.q);
    v_parts.push_back(z * z.transpose());
    free.push_back(!options.fixed_omega2);
    value.push_back(options.fixed_omega2.value_or(0.1));
  }
  if (d.diag_begin >= 0) {
    const Matrix z = d.x.middleCols(d.diag_begin, d.q);
    v_parts.push_back(z * z.transpose());
    free.push_back(!options.fixed_tau2);
    value.push_back(options.fixed_tau2.value_or(0.1));
  }
  const auto g = v_parts.size();

  Matrix vinv;
  Matrix p;
  Matrix xtvx_inv;
  auto refresh = [&]() {
    Matrix v = d.sigma;
    for (std::size_t i = 0; i < g; ++i) v += value[i] * v_parts[i];
    Eigen::LLT<Matrix> llt(v);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("non-finite likelihood: marginal covariance is singular");
    }
    vinv = llt.solve(Matrix::Identity(n, n));
    const Matrix xtvx = xf.transpose() * vinv * xf;
    Eigen::LLT<Matrix> lx(xtvx);
    if (lx.info() != Eigen::Success) {
      throw NumericalError("REML: fixed-effect design is rank deficient");
    }
    xtvx_inv = lx.solve(Matrix::Identity(xtvx.rows(), xtvx.cols()));
    p = vinv - vinv * xf * xtvx_inv * xf.transpose() * vinv;
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    double logdet_x = 0.0;
    const Matrix lxm = lx.matrixL();
    for (Index i = 0; i < lxm.rows(); ++i) logdet_x += 2.0 * std::log(lxm(i, i));
    return -0.5 * (logdet + logdet_x + d.y.dot(p * d.y));
  };

  RemlFit fit;
  double loglik = refresh();
  bool converged = g == 0;
  for (int it = 1; it <= 500 && !converged; ++it) {
    fit.iterations = it;
    const Vector py = p * d.y;
    Vector score = Vector::Zero(static_cast<Index>(g));
    Matrix info = Matrix::Zero(static_cast<Index>(g), static_cast<Index>(g));
    std::vector<Matrix> pv(g);
    for (std::size_t a = 0; a < g; ++a) {
      pv[a] = p * v_parts[a];
      score[static_cast<Index>(a)] =
          -0.5 * pv[a].trace() + 0.5 * py.dot(v_parts[a] * py);
    }
    for (std::size_t a = 0; a < g; ++a) {
      for (std::size_t b = 0; b < g; ++b) {
        info(static_cast<Index>(a), static_cast<Index>(b)) =
            0.5 * (pv[a].array() * pv[b].transpose().array()).sum();
      }
    }
    // Active set: parameters held fixed or pinned at the zero boundary.
    std::vector<Index> act;
    for (std::size_t a = 0; a < g; ++a) {
      if (!free[a]) continue;
      if (value[a] <= 0.0 && score[static_cast<Index>(a)] <= 0.0) continue;
      act.push_back(static_cast<Index>(a));
    }
    double change = 0.0;
    if (!act.empty()) {
      Matrix ia(static_cast<Index>(act.size()), static_cast<Index>(act.size()));
      Vector sa(static_cast<Index>(act.size()));
      for (std::size_t r = 0; r < act.size(); ++r) {
        sa[static_cast<Index>(r)] = score[act[r]];
        for (std::size_t c = 0; c < act.size(); ++c) {
          ia(static_cast<Index>(r), static_cast<Index>(c)) = info(act[r], act[c]);
        }
      }
      const Vector step = ia.completeOrthogonalDecomposition().solve(sa);
      for (std::size_t r = 0; r < act.size(); ++r) {
        auto& v = value[static_cast<std::size_t>(act[r])];
        const double next = std::clamp(v + step[static_cast<Index>(r)], 0.0,
                                       options.priors.variance_upper);
        change = std::max(change, std::abs(next - v) / std::max(1.0, std::abs(v)));
        v = next;
      }
    }
    loglik = refresh();
    if (change < 1e-10) converged = true;
  }
  if (!converged) {
    throw NumericalError("REML Fisher scoring did not converge in 500 iterations");
  }

  const Vector fixed = xtvx_inv * xf.transpose() * (vinv * d.y);
  fit.theta = fixed[0];
  fit.theta_se = std::sqrt(std::max(0.0, xtvx_inv(0, 0)));
  for (Index c = 1; c < d.num_fixed; ++c) fit.theta_k.push_back(fixed[c]);
  const Vector py = p * d.y;
  std::size_t slot = 0;
  fit.beta.assign(static_cast<std::size_t>(d.q), 0.0);
  if (d.beta_begin >= 0) {
    fit.omega2 = value[slot++];
    const Vector blup = fit.omega2 * d.x.middleCols(d.beta_begin, d.q).transpose() * py;
    for (int j = 0; j < d.q; ++j) fit.beta[static_cast<std::size_t>(j)] = blup[j];
  }
  const double second = d.diag_begin >= 0 ? value[slot] : 0.0;
  if (options.diagonal_effect == DiagonalEffect::kSharedBeta) {
    fit.xi2 = second;
    fit.tau2 = fit.omega2 + second;
  } else {
    fit.tau2 = second;
    fit.xi2 = std::max(0.0, fit.tau2 - fit.omega2);
  }
  fit.log_likelihood = loglik;
  return fit;
}

nlohmann::json to_json(const Posterior& posterior) {
  nlohmann::json theta_k = nlohmann::json::array();
  for (std::size_t i = 0; i < posterior.theta_k.size(); ++i) {
    auto s = summary_json(summarize_draws(Posterior::flatten(posterior.theta_k[i])));
    s["k"] = posterior.z + 1 + static_cast<int>(i);
    theta_k.push_back(s);
  }
  nlohmann::json population = nlohmann::json::array();
  for (int j = 1; j <= posterior.q; ++j) {
    auto s = summary_json(population_summary(posterior, j));
    s["j"] = j;
    population.push_back(s);
  }
  return {{"q", posterior.q},
          {"z", posterior.z},
          {"theta", summary_json(summarize_draws(Posterior::flatten(posterior.theta)))},
          {"theta_k", theta_k},
          {"omega2", summary_json(summarize_draws(Posterior::flatten(posterior.omega2)))},
          {"tau2", summary_json(summarize_draws(Posterior::flatten(posterior.tau2)))},
          {"xi2", summary_json(xi_summary(posterior))},
          {"population", population},
          {"diagnostics", {{"rhat_theta", posterior.rhat_theta}, {"warnings", posterior.warnings}}},
          {"mcmc",
           {{"chains", posterior.mcmc.chains},
            {"adapt", posterior.mcmc.adapt},
            {"samples", posterior.mcmc.samples},
            {"thin", posterior.mcmc.thin},
            {"seed", posterior.seed}}}};
}

nlohmann::json to_json(const RemlFit& fit) {
  return {{"theta", fit.theta},     {"theta_se", fit.theta_se}, {"theta_k", fit.theta_k},
          {"omega2", fit.omega2},   {"tau2", fit.tau2},         {"xi2", fit.xi2},
          {"beta", fit.beta},       {"iterations", fit.iterations},
          {"log_likelihood", fit.log_likelihood}};
}

void write_draws_csv(std::ostream& out, const Posterior& posterior) {
  out << "chain,iter,param,value\n";
  out << std::setprecision(17);
  auto emit = [&](const std::string& name, const std::vector<std::vector<double>>& chains) {
    for (std::size_t c = 0; c < chains.size(); ++c) {
      for (std::size_t i = 0; i < chains[c].size(); ++i) {
        out << c + 1 << ',' << i + 1 << ',' << name << ',' << chains[c][i] << '\n';
      }
    }
  };
  emit("theta", posterior.theta);
  for (std::size_t k = 0; k < posterior.theta_k.size(); ++k) {
    emit("theta_k[" + std::to_string(posterior.z + 1 + static_cast<int>(k)) + "]",
         posterior.theta_k[k]);
  }
  for (std::size_t j = 0; j < posterior.beta.size(); ++j) {
    emit("beta[" + std::to_string(j + 1) + "]", posterior.beta[j]);
  }
  emit("omega2", posterior.omega2);
  emit("tau2", posterior.tau2);
  emit("xi2", posterior.xi2);
}

DiagonalUse parse_diagonal_use(const std::string& name) {
  if (name == "literal") return DiagonalUse::kLiteral;
  if (name == "dedupe" || name == "dedupe_diagonal") return DiagonalUse::kDedupe;
  throw ValidationError("unknown diagonal use '" + name + "' (literal|dedupe)");
}

DiagonalEffect parse_diagonal_effect(const std::string& name) {
  if (name == "independent") return DiagonalEffect::kIndependent;
  if (name == "shared_beta" || name == "shared-beta") return DiagonalEffect::kSharedBeta;
  throw ValidationError("unknown diagonal effect '" + name + "' (independent|shared_beta)");
}

}  // namespace causalmeta
