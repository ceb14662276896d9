#include <gtest/gtest.h>

#include <random>

#include "causalmeta/pseudo_ipd.h"
#include "causalmeta/sandwich.h"
#include "causalmeta/simulation.h"

namespace causalmeta {
namespace {

struct AllIpd {
  std::vector<IpdTrial> trials;
  BasisSpec spec = BasisSpec::main_effects(2);
  std::map<int, Matrix> rows;
  std::map<int, TargetMoments> moments;
  double pooled = 0.0;

  explicit AllIpd(std::uint64_t seed, Index n = 3000) : trials(dgp_transport(1, n, seed)) {
    for (const auto& t : trials) {
      rows[t.study_id] = t.covariates;
      moments[t.study_id] = target_moments_from_rows(t.study_id, t.covariates, spec);
      pooled += static_cast<double>(t.size());
    }
  }

  EstimatingStack stack(int k, EffectScale scale = EffectScale::kRiskDifference,
                        double truncation = 1.0) const {
    const auto& src = trials[static_cast<std::size_t>(k - 1)];
    std::vector<StackTarget> targets;
    for (const auto& t : trials) {
      auto fit = t.study_id == k ? identity_fit(src, spec, spec)
                                 : solve_weights(src, target_from_ipd(t, spec), spec);
      if (truncation < 1.0 && t.study_id != k) fit = truncate_weights(fit, truncation);
      targets.push_back({std::move(fit), static_cast<double>(t.size())});
    }
    return EstimatingStack(src, std::move(targets), pooled, scale);
  }
};

Matrix finite_difference_bread(const EstimatingStack& s, const std::map<int, Matrix>& rows) {
  const Vector est = s.estimate();
  Matrix fd(s.dim(), s.dim());
  for (Index c = 0; c < s.dim(); ++c) {
    const double h = 1e-6 * std::max(1.0, std::abs(est[c]));
    Vector up = est, dn = est;
    up[c] += h;
    dn[c] -= h;
    fd.col(c) = (s.mean_estimating_function(up, rows) - s.mean_estimating_function(dn, rows)) /
                (2 * h);
  }
  return fd;
}

TEST(Sandwich, IdentityBreadAndMeat) {
  const Matrix cov = sandwich(Matrix::Identity(3, 3), Matrix::Identity(3, 3), 100.0);
  EXPECT_LT((cov - Matrix::Identity(3, 3) / 100.0).cwiseAbs().maxCoeff(), 1e-17);
}

TEST(Sandwich, SingularBreadRejected) {
  const Matrix b = (Matrix(2, 2) << 1.0, 1.0, 1.0, 1.0 + 1e-14).finished();
  EXPECT_THROW(sandwich(b, Matrix::Identity(2, 2), 10.0), NumericalError);
  // Bad units alone are not singularity.
  const Matrix units = (Matrix(2, 2) << 1e8, 0.0, 0.0, 1e-8).finished();
  EXPECT_NO_THROW(sandwich(units, Matrix::Identity(2, 2), 10.0));
}

TEST(Sandwich, EstimatingFunctionVanishesAtEstimate) {
  const AllIpd d(1);
  for (int k = 1; k <= 3; ++k) {
    const auto s = d.stack(k);
    EXPECT_LT(s.mean_estimating_function(s.estimate(), d.rows).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Sandwich, BreadMatchesFiniteDifferences) {
  const AllIpd d(2);
  for (auto scale : {EffectScale::kRiskDifference, EffectScale::kLogRelativeRisk,
                     EffectScale::kLogOddsRatio}) {
    const auto s = d.stack(2, scale);
    const Matrix analytic = s.bread();
    const Matrix fd = finite_difference_bread(s, d.rows);
    const double scale_ref = analytic.cwiseAbs().maxCoeff();
    EXPECT_LT((analytic - fd).cwiseAbs().maxCoeff(), 1e-6 * scale_ref) << to_string(scale);
  }
}

TEST(Sandwich, ThetaDiagonalIsMinusOneAndBetaBlocksDecouple) {
  const AllIpd d(3);
  const auto s = d.stack(3);
  const Matrix b = s.bread();
  for (const auto i : s.theta_indices()) EXPECT_EQ(b(i, i), -1.0);
  // beta rows of target 1 do not depend on beta of target 2 and vice versa.
  const Index o1 = s.beta_offset(1);
  const Index o2 = s.beta_offset(2);
  ASSERT_NE(o1, o2);
  EXPECT_EQ(b.block(o1, o2, 3, 3).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(b.block(o2, o1, 3, 3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Sandwich, BlockMeatEqualsStackedRowsWithIpdTargets) {
  const AllIpd d(4);
  for (int k = 1; k <= 3; ++k) {
    const auto s = d.stack(k);
    const Matrix blocks = s.meat(d.moments);
    const Matrix stacked = s.meat_by_stacking(d.rows);
    EXPECT_LT((blocks - stacked).cwiseAbs().maxCoeff(), 1e-10 * blocks.cwiseAbs().maxCoeff());
  }
}

TEST(Sandwich, BlockMeatEqualsStackedRowsWithPseudoTarget) {
  const auto trials = dgp_transport(1, 2000, 5);
  const auto spec = BasisSpec::main_effects(2);
  const auto hidden = summarize(trials[0], EffectScale::kRiskDifference);
  const std::vector<IpdTrial> sources{trials[1], trials[2]};
  const auto recon = reconstruct_covariance(hidden, sources, spec, spec);
  const auto pseudo = make_pseudo_trial(hidden, recon, 9);
  std::map<int, Matrix> rows{{1, pseudo.data.covariates}, {2, trials[1].covariates}};
  std::map<int, TargetMoments> moments;
  for (const auto& [j, m] : rows) moments[j] = target_moments_from_rows(j, m, spec);
  const auto fit = truncate_weights(solve_weights(trials[1], target_from_aggregated(hidden, spec), spec), 0.95);
  const EstimatingStack s(trials[1],
                          {{fit, double(hidden.size())},
                           {identity_fit(trials[1], spec, spec), double(trials[1].size())}},
                          2000.0, EffectScale::kRiskDifference);
  const Matrix blocks = s.meat(moments);
  const Matrix stacked = s.meat_by_stacking(rows);
  EXPECT_LT((blocks - stacked).cwiseAbs().maxCoeff(), 1e-10 * blocks.cwiseAbs().maxCoeff());
}

TEST(Sandwich, ReconstructedMomentsEqualPseudoRowMoments) {
  // Exact pseudo rows carry the reconstructed first and second moments, so
  // both target-moment routes give the same meat.
  const auto trials = dgp_transport(1, 2000, 6);
  const auto spec = BasisSpec::main_effects(2);
  const auto hidden = summarize(trials[0], EffectScale::kRiskDifference);
  const std::vector<IpdTrial> sources{trials[1], trials[2]};
  const auto recon = reconstruct_covariance(hidden, sources, spec, spec);
  const auto pseudo = make_pseudo_trial(hidden, recon, 9);
  std::vector<std::string> warnings;
  auto aligned = recon;
  aligned.covariance = pseudo_target_covariance(hidden, recon, warnings);
  aligned.mean = pseudo.report.target_mean;
  aligned.second_moment = aligned.covariance + aligned.mean * aligned.mean.transpose();
  const auto a = target_moments_from_reconstruction(aligned, hidden.size(), spec);
  const auto b = target_moments_from_rows(1, pseudo.data.covariates, spec);
  EXPECT_LT((a.basis_second_moment - b.basis_second_moment).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sandwich, InteractionMomentsNeedParticipantRows) {
  ReconstructedMoments r;
  r.target = 1;
  r.mean = Vector::Constant(2, 0.5);
  r.covariance = Matrix::Identity(2, 2);
  r.second_moment = r.covariance + r.mean * r.mean.transpose();
  EXPECT_THROW(target_moments_from_reconstruction(r, 100, BasisSpec::parse("1,l1,l1*l2", 2)),
               ValidationError);
}

TEST(Sandwich, CovarianceSymmetricPsdAndDeterministic) {
  const AllIpd d(7);
  const auto s = d.stack(2, EffectScale::kRiskDifference, 0.95);
  const auto a = sandwich(s, d.moments);
  const auto b = sandwich(d.stack(2, EffectScale::kRiskDifference, 0.95), d.moments);
  EXPECT_EQ(a.covariance, b.covariance);
  EXPECT_EQ(a.covariance, a.covariance.transpose());
  EXPECT_GE(a.min_eigenvalue, -1e-10);
  EXPECT_GT(a.variances().minCoeff(), 0.0);
}

TEST(Sandwich, BootstrapAgreementAtN1000) {
  const Index n = 1000;
  const auto trials = dgp_transport(1, n, 2024);
  const auto spec = BasisSpec::main_effects(2);
  auto estimate = [&](const std::vector<IpdTrial>& t) {
    const auto hidden = summarize(t[0], EffectScale::kRiskDifference);
    const auto fit = solve_weights(t[1], target_from_aggregated(hidden, spec), spec);
    return standardize_effect(t[1], fit, EffectScale::kRiskDifference).estimate;
  };
  // Sandwich with the hidden trial represented by pseudo rows.
  const auto hidden = summarize(trials[0], EffectScale::kRiskDifference);
  const std::vector<IpdTrial> sources{trials[1], trials[2]};
  const auto recon = reconstruct_covariance(hidden, sources, spec, spec);
  const auto pseudo = make_pseudo_trial(hidden, recon, 1);
  const EstimatingStack s(
      trials[1],
      {{solve_weights(trials[1], target_from_aggregated(hidden, spec), spec), double(hidden.size())}},
      static_cast<double>(n), EffectScale::kRiskDifference);
  const double v_sandwich =
      sandwich_by_stacking(s, {{1, pseudo.data.covariates}}).theta_covariance(0, 0);

  // Resample participants within each trial.
  std::mt19937_64 rng(77);
  std::vector<double> boot;
  for (int b = 0; b < 500; ++b) {
    std::vector<IpdTrial> re;
    for (const auto& t : trials) {
      std::uniform_int_distribution<Index> pick(0, t.size() - 1);
      IpdTrial r = t;
      for (Index i = 0; i < t.size(); ++i) {
        const Index from = pick(rng);
        r.covariates.row(i) = t.covariates.row(from);
        r.treatment[i] = t.treatment[from];
        r.outcome[i] = t.outcome[from];
      }
      re.push_back(std::move(r));
    }
    try {
      boot.push_back(estimate(re));
    } catch (const Error&) {
      // resamples with a single arm or no overlap are dropped
    }
  }
  ASSERT_GE(boot.size(), 490u);
  const double v_boot = sample_variance(boot);
  EXPECT_NEAR(v_sandwich / v_boot, 1.0, 0.2) << v_sandwich << " vs " << v_boot;
}

TEST(AssembleEffectCovariance, BookkeepingAndIndependence) {
  const AllIpd d(8);
  std::vector<SandwichResult> per_source;
  for (int k = 1; k <= 3; ++k) per_source.push_back(sandwich(d.stack(k), d.moments));
  const auto table = assemble_effect_covariance(3, 0, per_source, {});
  EXPECT_EQ(table.entries.size(), 9u);
  for (std::size_t a = 0; a < table.entries.size(); ++a) {
    const auto& ea = table.entries[a];
    const auto& r = per_source[static_cast<std::size_t>(ea.k - 1)];
    const auto pos = static_cast<Index>(
        std::find(r.targets.begin(), r.targets.end(), ea.j) - r.targets.begin());
    EXPECT_EQ(table.sigma(Index(a), Index(a)), r.theta_covariance(pos, pos));
    EXPECT_EQ(ea.estimate, r.theta[pos]);
    for (std::size_t b = 0; b < table.entries.size(); ++b) {
      if (table.entries[b].k != ea.k) EXPECT_EQ(table.sigma(Index(a), Index(b)), 0.0);
    }
  }
  EXPECT_EQ(table.sigma, table.sigma.transpose());
  EXPECT_GE(min_eigenvalue(table.sigma), -1e-12);
}

TEST(AssembleEffectCovariance, AggregatedDiagonalUsesReportedSe) {
  const AllIpd d(9);
  auto hidden = summarize(d.trials[0], EffectScale::kRiskDifference);
  hidden.own_effect.se = 0.07;
  std::vector<SandwichResult> per_source;
  for (int k = 2; k <= 3; ++k) per_source.push_back(sandwich(d.stack(k), d.moments));
  const auto table = assemble_effect_covariance(3, 1, per_source, std::vector{hidden});
  const auto at = table.find(1, 1);
  ASSERT_TRUE(at.has_value());
  EXPECT_DOUBLE_EQ(table.sigma(Index(*at), Index(*at)), 0.0049);
  EXPECT_EQ(table.entries.size(), 7u);
  hidden.own_effect.se = 0.0;
  EXPECT_THROW(assemble_effect_covariance(3, 1, per_source, std::vector{hidden}), ValidationError);
}

}  // namespace
}  // namespace causalmeta
