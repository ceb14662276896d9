#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "causalmeta/meta_model.h"
#include "causalmeta/simulation.h"

namespace causalmeta {
namespace {

McmcSettings quick(int samples = 2000) {
  McmcSettings m;
  m.adapt = 500;
  m.samples = samples;
  m.thin = 1;
  return m;
}

// One IPD column (study 6) plus aggregated diagonals: the transported line is
// a one-random-effect meta-analysis of the six theta(j, 6).
EffectTable single_column_table() {
  const double y[] = {0.12, 0.35, -0.05, 0.28, 0.51, 0.02};
  const double v[] = {0.010, 0.020, 0.015, 0.030, 0.012, 0.025};
  EffectTable t;
  t.q = 6;
  t.z = 5;
  for (int j = 1; j <= 5; ++j) t.entries.push_back({j, j, 0.1 * j});
  for (int j = 1; j <= 6; ++j) t.entries.push_back({j, 6, y[j - 1]});
  t.sigma = Matrix::Zero(11, 11);
  for (Index a = 0; a < 5; ++a) t.sigma(a, a) = 0.02;
  for (Index a = 0; a < 6; ++a) t.sigma(5 + a, 5 + a) = v[a];
  t.validate();
  return t;
}

TEST(Mcmc, ConjugateNormalPosterior) {
  EffectTable t;
  t.q = 1;
  t.z = 0;
  t.entries = {{1, 1, 0.3}};
  t.sigma = Matrix::Constant(1, 1, 0.04);
  MetaOptions o;
  o.fixed_omega2 = 0.0;
  o.fixed_tau2 = 0.0;
  o.mcmc = quick(5000);
  const auto post = fit_submodel_mcmc(t, o, 42);
  const auto draws = Posterior::flatten(post.theta);
  const double prec = 1.0 / 0.04 + 1.0 / 1000.0;
  const double mean_exact = 0.3 / 0.04 / prec;
  const double var_exact = 1.0 / prec;
  const double n = static_cast<double>(draws.size());
  EXPECT_NEAR(mean(draws), mean_exact, 3.0 * std::sqrt(var_exact / n));
  EXPECT_NEAR(sample_variance(draws), var_exact, 3.0 * var_exact * std::sqrt(2.0 / (n - 1)));
}

TEST(Mcmc, SeedDeterminismAcrossThreadCounts) {
  const auto t = single_column_table();
  MetaOptions o;
  o.mcmc = quick(300);
  o.threads = 1;
  const auto a = fit_submodel_mcmc(t, o, 9);
  o.threads = 2;
  const auto b = fit_submodel_mcmc(t, o, 9);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.omega2, b.omega2);
  EXPECT_EQ(a.tau2, b.tau2);
  const auto c = fit_submodel_mcmc(t, o, 10);
  EXPECT_NE(a.theta, c.theta);
}

TEST(Mcmc, WiderErrorsWidenThetaPosterior) {
  const auto base = single_column_table();
  MetaOptions o;
  o.mcmc = quick(4000);
  double last = 0.0;
  for (double c : {0.25, 1.0, 4.0}) {
    auto t = base;
    t.sigma *= c;
    const auto s = summarize_draws(Posterior::flatten(fit_submodel_mcmc(t, o, 3).theta));
    EXPECT_GT(s.upper - s.lower, last) << "scale " << c;
    last = s.upper - s.lower;
  }
}

TEST(Mcmc, XiIsFlooredDifferencePerDraw) {
  const auto t = single_column_table();
  MetaOptions o;
  o.mcmc = quick(500);
  const auto post = fit_submodel_mcmc(t, o, 5);
  for (std::size_t c = 0; c < post.xi2.size(); ++c) {
    for (std::size_t i = 0; i < post.xi2[c].size(); ++i) {
      EXPECT_EQ(post.xi2[c][i], std::max(0.0, post.tau2[c][i] - post.omega2[c][i]));
    }
  }
}

TEST(DeriveXi, FloorAndDifference) {
  EXPECT_EQ(derive_xi({0.1, 0.2}, {0.3, 0.5}), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(derive_xi({1.0, 1.0}, {0.5, 0.5}), (std::vector<double>{0.5, 0.5}));
  EXPECT_THROW(derive_xi({1.0}, {0.5, 0.5}), ValidationError);
}

TEST(PopulationSummary, ZeroOmegaEqualsTheta) {
  const auto t = single_column_table();
  MetaOptions o;
  o.fixed_omega2 = 0.0;
  o.mcmc = quick(400);
  const auto post = fit_submodel_mcmc(t, o, 8);
  const auto theta = summarize_draws(Posterior::flatten(post.theta));
  for (int j = 1; j <= 6; ++j) {
    const auto s = population_summary(post, j);
    EXPECT_EQ(s.median, theta.median);
    EXPECT_EQ(s.lower, theta.lower);
    EXPECT_EQ(s.upper, theta.upper);
  }
}

TEST(PopulationSummary, MedianOfElementwiseSums) {
  const auto t = single_column_table();
  MetaOptions o;
  o.mcmc = quick(400);
  const auto post = fit_submodel_mcmc(t, o, 8);
  const auto theta = Posterior::flatten(post.theta);
  const auto beta = Posterior::flatten(post.beta[2]);
  std::vector<double> sum(theta.size());
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = theta[i] + beta[i];
  EXPECT_EQ(population_summary(post, 3).median, median(sum));
}

TEST(Reml, SingleColumnMatchesOneDimensionalOracle) {
  MetaOptions o;
  o.diagonal_use = DiagonalUse::kDedupe;
  o.fixed_tau2 = 0.0;
  const auto fit = fit_submodel_reml(single_column_table(), o);
  // Root of the univariate restricted-likelihood score, solved independently.
  EXPECT_NEAR(fit.omega2, 0.032487634973, 1e-4);
  EXPECT_NEAR(fit.theta_k[0], 0.206925541180, 1e-4);
  const double blup[] = {-0.0664665203, 0.0885570629, -0.1757700336,
                         0.0379917778, 0.2213237992,  -0.1056360859};
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(fit.beta[static_cast<std::size_t>(j)], blup[j], 1e-4);
  EXPECT_NEAR(fit.theta, 0.3, 1e-10);  // equal-variance mean of the diagonals
}

TEST(Reml, HomogeneousTableHasNoHeterogeneity) {
  const auto seed_table = single_column_table();
  auto t = seed_table;
  for (auto& e : t.entries) e.estimate = 0.2;
  t.sigma *= 1e-4;
  const auto fit = fit_submodel_reml(t);
  EXPECT_EQ(fit.omega2, 0.0);
  EXPECT_EQ(fit.tau2, 0.0);
  for (double b : fit.beta) EXPECT_NEAR(b, 0.0, 1e-12);
}

TEST(Reml, InsidePosteriorIntervalsOnSimulatedTable) {
  const int q = 20, z = 10;
  const Matrix sigma = gen_residual_cov(q, 1);
  const Eigen::LLT<Matrix> llt(sigma);
  const Vector y = draw_meta_effects(q, 0.0, 0.5, 0.5, llt, 3);
  const auto table = EffectTable::from_full(q, z, y, sigma);
  MetaOptions o;
  o.mcmc = quick(2000);
  const auto post = fit_submodel_mcmc(table, o, 4);
  const auto reml = fit_submodel_reml(table, o);
  auto inside = [](const std::vector<std::vector<double>>& chains, double v) {
    const auto s = summarize_draws(Posterior::flatten(chains));
    return s.lower <= v && v <= s.upper;
  };
  EXPECT_TRUE(inside(post.theta, reml.theta));
  EXPECT_TRUE(inside(post.omega2, reml.omega2));
  EXPECT_TRUE(inside(post.tau2, reml.tau2));
}

TEST(Mcmc, DrawsCsvLongFormat) {
  const auto t = single_column_table();
  MetaOptions o;
  o.mcmc = quick(5);
  o.mcmc.adapt = 5;
  const auto post = fit_submodel_mcmc(t, o, 1);
  std::ostringstream out;
  write_draws_csv(out, post);
  EXPECT_EQ(out.str().substr(0, 22), "chain,iter,param,value");
  const auto j = to_json(post);
  EXPECT_TRUE(j.contains("theta"));
  EXPECT_EQ(j.at("population").size(), 6u);
}

TEST(Mcmc, NeedsAnIpdColumn) {
  EffectTable t;
  t.q = 2;
  t.z = 2;
  t.entries = {{1, 1, 0.1}, {2, 2, 0.2}};
  t.sigma = Matrix::Identity(2, 2) * 0.01;
  EXPECT_THROW(fit_submodel_mcmc(t, MetaOptions{}, 1), ValidationError);
}

}  // namespace
}  // namespace causalmeta
