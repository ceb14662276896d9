#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "causalmeta/simulation.h"

namespace causalmeta {
namespace {

// Quadrature values of theta(j, k) under the membership and outcome models.
struct QuadratureTruth {
  int setting, j, k;
  double value;
};
constexpr QuadratureTruth kQuadrature[] = {
    {1, 1, 1, 0.2689424420}, {1, 2, 2, 0.1536980511}, {1, 3, 3, -0.0737320894},
    {1, 1, 2, 0.0933821768}, {1, 1, 3, -0.0150336390}, {2, 1, 1, 0.2908695308},
    {2, 2, 2, 0.1313333776}, {2, 3, 3, -0.1040114862}, {2, 1, 2, 0.1167292164},
    {2, 1, 3, 0.0060517980},
};

std::uint64_t fnv1a(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  for (std::size_t i = 0; i < sizeof(double) * static_cast<std::size_t>(m.size()); ++i) {
    h = (h ^ bytes[i]) * 1099511628211ULL;
  }
  return h;
}

TEST(OracleTruth, MatchesQuadrature) {
  for (const auto& q : kQuadrature) {
    const auto& t = oracle_truth_table(q.setting, 2'000'000, 20240601);
    const auto j = static_cast<std::size_t>(q.j - 1), k = static_cast<std::size_t>(q.k - 1);
    EXPECT_NEAR(t.theta[j][k], q.value, 4.0 * t.mc_se[j][k])
        << "setting " << q.setting << " theta(" << q.j << "," << q.k << ")";
  }
}

TEST(OracleTruth, SettingOneDiagonalIsHeterogeneous) {
  const auto& t = oracle_truth_table(1, 2'000'000, 20240601);
  EXPECT_NEAR(t.theta[0][0], 0.27, 0.005);
  EXPECT_NEAR(t.theta[1][1], 0.15, 0.005);
  EXPECT_NEAR(t.theta[2][2], -0.07, 0.005);
}

TEST(OracleTruth, IndependentSeedsAgree) {
  const auto& a = oracle_truth_table(1, 1'000'000, 1);
  const auto& b = oracle_truth_table(1, 1'000'000, 2);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double se = std::hypot(a.mc_se[j][k], b.mc_se[j][k]);
      EXPECT_NEAR(a.theta[j][k], b.theta[j][k], 2.0 * se);
    }
  }
}

TEST(Dgp, RandomizedTreatmentAndIds) {
  const Index n = 40000;
  const auto trials = dgp_transport(1, n, 3);
  ASSERT_EQ(trials.size(), 3u);
  Index total = 0;
  double treated = 0.0;
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(trials[static_cast<std::size_t>(s)].study_id, s + 1);
    total += trials[static_cast<std::size_t>(s)].size();
    treated += trials[static_cast<std::size_t>(s)].treatment.cast<double>().sum();
  }
  EXPECT_EQ(total, n);
  EXPECT_NEAR(treated / n, 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST(Dgp, SameSeedSameData) {
  const auto a = dgp_transport(2, 800, 5);
  const auto b = dgp_transport(2, 800, 5);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(a[s].covariates, b[s].covariates);
}

TEST(TransportSim, ReportRowsAreConsistent) {
  TransportSimConfig c;
  c.n = 1000;
  c.replicates = 60;
  c.truth_draws = 1'000'000;
  const auto report = run_transport_sim(c);
  ASSERT_EQ(report.rows.size(), 2u);
  for (const auto& r : report.rows) {
    EXPECT_NEAR(r.mse, r.bias * r.bias + r.empirical_variance, 1e-9);
    const double cov = r.coverage / 100.0;
    EXPECT_NEAR(r.coverage_mcse, 100.0 * std::sqrt(cov * (1 - cov) / r.replicates), 1e-9);
    EXPECT_EQ(r.replicates + r.failed, 60);
  }
  EXPECT_EQ(report.rows[0].parameter, "theta(1,2)");
  EXPECT_EQ(report.rows[1].parameter, "theta(1,3)");
}

TEST(TransportSim, ReplicateReproducibleInIsolation) {
  TransportSimConfig c;
  c.n = 600;
  c.replicates = 8;
  c.truth_draws = 1'000'000;
  c.threads = 3;
  const auto report = run_transport_sim(c);
  const auto alone = run_transport_replicate(c, 5);
  EXPECT_EQ(alone.estimate, report.replicates[5].estimate);
  EXPECT_EQ(alone.variance, report.replicates[5].variance);
  c.threads = 1;
  const auto serial = run_transport_sim(c);
  EXPECT_EQ(serial.rows[0].bias, report.rows[0].bias);
  EXPECT_EQ(serial.rows[1].median_variance_estimate, report.rows[1].median_variance_estimate);
}

TEST(ResidualCov, ZeroPatternSymmetryAndScale) {
  const int q = 20;
  const Matrix s = gen_residual_cov(q, 1);
  ASSERT_EQ(s.rows(), q * q);
  EXPECT_EQ(s, s.transpose());
  for (int a = 0; a < q * q; ++a) {
    for (int b = 0; b < q * q; ++b) {
      const bool share = a / q == b / q || a % q == b % q;
      if (!share) EXPECT_EQ(s(a, b), 0.0);
    }
  }
  EXPECT_NEAR(s.diagonal().mean(), 0.1, 0.01);
}

TEST(ResidualCov, GoldenSnapshot) {
  EXPECT_EQ(fnv1a(gen_residual_cov(4, 1)), 7486012182126197102ULL);
  EXPECT_EQ(fnv1a(gen_residual_cov(20, 1)), 8392743310915224122ULL);
}

MetaSimConfig small_meta(int q, double omega2) {
  MetaSimConfig c;
  c.q = q;
  c.z = q / 2;
  c.replicates = 16;
  c.omega2 = omega2;
  c.options.mcmc.adapt = 1000;
  c.options.mcmc.samples = 500;
  c.options.mcmc.thin = 1;
  return c;
}

TEST(MetaSim, MoreStudiesTightenDistributions) {
  const auto a = run_meta_sim(small_meta(10, 0.5));
  const auto b = run_meta_sim(small_meta(30, 0.5));
  EXPECT_LT(b.iqr[0], a.iqr[0]);
  EXPECT_LT(b.iqr[1], a.iqr[1]);
}

TEST(MetaSim, NoPopulationHeterogeneity) {
  const auto r = run_meta_sim(small_meta(20, 0.0));
  EXPECT_LT(r.median_of_medians[1], 0.1);
}

}  // namespace
}  // namespace causalmeta
