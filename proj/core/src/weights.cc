#include "causalmeta/weights.h"

#include <algorithm>
#include <array>
#include <span>
#include <cmath>
#include <limits>
#include <sstream>

#include "causalmeta/stats.h"

namespace causalmeta {

namespace {

std::string vec_str(const Vector& v) {
  std::ostringstream os;
  os << '[';
  for (Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  os << ']';
  return os.str();
}

std::string term_name(const BasisSpec& spec, Index c) {
  return BasisSpec({spec.terms()[static_cast<std::size_t>(c)]}).to_string();
}

// Coordinatewise overlap screen: a just-reachable target must lie strictly
// inside the range of the source basis values.
void check_overlap(const Matrix& moment_design, const Vector& target,
                   const BasisSpec& moments, int source, int target_id) {
  for (Index c = 0; c < moment_design.cols(); ++c) {
    const double lo = moment_design.col(c).minCoeff();
    const double hi = moment_design.col(c).maxCoeff();
    const double t = target[c];
    const double scale = 1.0 + std::max(std::abs(lo), std::abs(hi));
    std::ostringstream msg;
    msg << "no finite solution for target " << target_id << " from source "
        << source << ": basis coordinate " << c << " (" << term_name(moments, c)
        << ") target mean " << t;
    if (hi - lo <= 1e-12 * scale) {
      if (std::abs(t - lo) > 1e-10) {
        msg << " differs from the constant source value " << lo;
        throw InfeasibleError(msg.str());
      }
      continue;
    }
    if (!(t > lo) || !(t < hi)) {
      msg << " lies outside the source range (" << lo << ", " << hi << ")";
      throw InfeasibleError(msg.str());
    }
  }
}

void finalize_weights(PropensityRatioFit& fit) {
  fit.normalized = fit.weights / fit.weights.sum();
}

}  // namespace

MomentTargets target_from_aggregated(const AggregatedTrial& trial,
                                     const BasisSpec& moments) {
  moments.check_covariates(trial.num_covariates());
  const auto pooled = pool_arm_moments(trial);
  MomentTargets out{trial.study_id, Vector(moments.size())};
  for (Index i = 0; i < moments.size(); ++i) {
    const auto& t = moments.terms()[static_cast<std::size_t>(i)];
    switch (t.kind) {
      case BasisTerm::Kind::kConstant:
        out.basis_means[i] = 1.0;
        break;
      case BasisTerm::Kind::kLinear:
        out.basis_means[i] = pooled.mean[t.a];
        break;
      case BasisTerm::Kind::kSquare:
        out.basis_means[i] = pooled.raw2[t.a];
        break;
      case BasisTerm::Kind::kInteraction:
        throw ValidationError(
            "insufficient aggregated data: basis term " + term_name(moments, i) +
            " needs cross moments that study " + std::to_string(trial.study_id) +
            " does not report");
    }
  }
  return out;
}

MomentTargets target_from_ipd(const IpdTrial& trial, const BasisSpec& moments) {
  return {trial.study_id, moments.design(trial.covariates).colwise().mean().transpose()};
}

MomentObjective::MomentObjective(Matrix model_design, Matrix moment_design,
                                 Vector target)
    : model_design_(std::move(model_design)),
      moment_design_(std::move(moment_design)),
      target_(std::move(target)) {}

Vector MomentObjective::weights(const Vector& beta) const {
  return (model_design_ * beta).array().exp().matrix();
}

Vector MomentObjective::residual(const Vector& beta) const {
  const double n = static_cast<double>(moment_design_.rows());
  return moment_design_.transpose() * weights(beta) / n - target_;
}

Matrix MomentObjective::jacobian(const Vector& beta) const {
  const double n = static_cast<double>(moment_design_.rows());
  const Vector w = weights(beta);
  return moment_design_.transpose() * w.asDiagonal() * model_design_ / n;
}

double MomentObjective::value(const Vector& beta) const {
  return residual(beta).squaredNorm();
}

Vector MomentObjective::gradient(const Vector& beta) const {
  return 2.0 * jacobian(beta).transpose() * residual(beta);
}

Matrix MomentObjective::hessian(const Vector& beta) const {
  const double n = static_cast<double>(moment_design_.rows());
  const Vector w = weights(beta);
  const Vector r = moment_design_.transpose() * w / n - target_;
  const Matrix jac = moment_design_.transpose() * w.asDiagonal() * model_design_ / n;
  // sum_c r_c * d^2 res_c / d beta^2 = Psi' diag(w .* (Phi r)) Psi / n
  const Vector curvature = w.cwiseProduct(moment_design_ * r);
  return 2.0 * (jac.transpose() * jac +
                model_design_.transpose() * curvature.asDiagonal() * model_design_ / n);
}

PropensityRatioFit solve_weights(const IpdTrial& source,
                                 const MomentTargets& targets,
                                 const BasisSpec& model,
                                 const BasisSpec& moments,
                                 const SolverOptions& options) {
  if (source.size() == 0) throw ValidationError("source trial is empty");
  if (moments.size() < model.size()) {
    throw ValidationError("moment basis (" + std::to_string(moments.size()) +
                          " functions) is smaller than the weight model (" +
                          std::to_string(model.size()) + " parameters)");
  }
  if (targets.basis_means.size() != moments.size()) {
    throw ValidationError("moment targets do not match the moment basis dimension");
  }
  if (!targets.basis_means.allFinite()) {
    throw ValidationError("moment targets contain non-finite entries");
  }
  Matrix psi = model.design(source.covariates);
  Matrix phi = moments.design(source.covariates);
  check_overlap(phi, targets.basis_means, moments, source.study_id,
                targets.target_study);

  const MomentObjective objective(psi, phi, targets.basis_means);
  const Index p = objective.num_params();
  const bool square = objective.num_moments() == p;
  Vector beta = Vector::Zero(p);
  double f = objective.value(beta);

  PropensityRatioFit fit;
  fit.source = source.study_id;
  fit.target = targets.target_study;
  fit.model = model;
  fit.moments = moments;

  int it = 0;
  bool converged = false;
  Vector grad = objective.gradient(beta);
  for (; it < options.max_iter; ++it) {
    if (grad.norm() <= options.grad_tol) {
      converged = true;
      break;
    }
    const Vector r = objective.residual(beta);
    const Matrix jac = objective.jacobian(beta);
    Vector step;
    if (square) {
      Eigen::FullPivLU<Matrix> lu(jac);
      if (lu.isInvertible()) step = -lu.solve(r);
    } else {
      Eigen::LLT<Matrix> llt(objective.hessian(beta));
      if (llt.info() == Eigen::Success) step = -llt.solve(grad);
    }
    if (step.size() != p) {
      // Rank-deficient design (e.g. the square of a binary covariate):
      // minimum-norm Gauss-Newton step.
      step = -Eigen::CompleteOrthogonalDecomposition<Matrix>(jac).solve(r);
    }

    bool accepted = false;
    if (step.size() == p && step.allFinite() && grad.dot(step) < 0.0) {
      double t = 1.0;
      for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
        const Vector trial = beta + t * step;
        const double f_trial = objective.value(trial);
        if (std::isfinite(f_trial) && f_trial <= f + 1e-4 * t * grad.dot(step)) {
          beta = trial;
          f = f_trial;
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      // Levenberg-Marquardt on the Gauss-Newton model.
      const Matrix jtj = jac.transpose() * jac;
      double lambda = 1e-3 * std::max(jtj.diagonal().maxCoeff(), 1e-12);
      for (int k = 0; k < 40 && !accepted; ++k, lambda *= 10.0) {
        const Matrix damped = jtj + lambda * Matrix::Identity(p, p);
        const Vector trial = beta - damped.ldlt().solve(jac.transpose() * r);
        const double f_trial = objective.value(trial);
        if (std::isfinite(f_trial) && f_trial < f) {
          beta = trial;
          f = f_trial;
          accepted = true;
        }
      }
    }
    if (beta.norm() > options.divergence_norm) {
      throw InfeasibleError(
          "no finite solution for target " + std::to_string(targets.target_study) +
          " from source " + std::to_string(source.study_id) +
          ": weight coefficients diverge (|beta| = " + std::to_string(beta.norm()) +
          ")");
    }
    grad = objective.gradient(beta);
    if (!accepted) break;
  }
  if (!converged && grad.norm() <= options.grad_tol) converged = true;
  if (!converged) {
    throw SolverError("weight solver did not converge for target " +
                          std::to_string(targets.target_study) + " from source " +
                          std::to_string(source.study_id) + " after " +
                          std::to_string(it) + " iterations; last beta " +
                          vec_str(beta) + ", gradient norm " +
                          std::to_string(grad.norm()),
                      beta);
  }

  // Polish: the tolerance is on grad f = 2 J'r, so a few more full steps
  // take the residual to rounding level when the moments are matched exactly.
  for (int polish = 0; polish < 3 && f > 0.0; ++polish) {
    const Vector r = objective.residual(beta);
    const Matrix jac = objective.jacobian(beta);
    const Vector step = -Eigen::CompleteOrthogonalDecomposition<Matrix>(jac).solve(r);
    const Vector trial = beta + step;
    const double f_trial = objective.value(trial);
    if (!step.allFinite() || !(f_trial < f)) break;
    beta = trial;
    f = f_trial;
  }
  grad = objective.gradient(beta);

  fit.beta = beta;
  fit.raw_weights = objective.weights(beta);
  fit.weights = fit.raw_weights;
  finalize_weights(fit);
  fit.converged = true;
  fit.objective = f;
  fit.gradient_norm = grad.norm();
  fit.iterations = it;
  return fit;
}

PropensityRatioFit identity_fit(const IpdTrial& source, const BasisSpec& model,
                                const BasisSpec& moments) {
  PropensityRatioFit fit;
  fit.source = fit.target = source.study_id;
  fit.model = model;
  fit.moments = moments;
  fit.beta = Vector::Zero(model.size());
  fit.raw_weights = Vector::Ones(source.size());
  fit.weights = fit.raw_weights;
  finalize_weights(fit);
  fit.converged = true;
  return fit;
}

PropensityRatioFit truncate_weights(const PropensityRatioFit& fit,
                                    double percentile) {
  if (!(percentile > 0.0 && percentile <= 1.0)) {
    throw ValidationError("truncation percentile must lie in (0, 1], got " +
                          std::to_string(percentile));
  }
  if (fit.raw_weights.size() == 0) {
    throw ValidationError("fit has no weights to truncate");
  }
  PropensityRatioFit out = fit;
  const std::span<const double> raw(fit.raw_weights.data(),
                                    static_cast<std::size_t>(fit.raw_weights.size()));
  const double cap = quantile_inverse_cdf(raw, percentile);
  out.weights = fit.raw_weights.cwiseMin(cap);
  out.truncation_cap = cap;
  out.truncation_percentile = percentile;
  finalize_weights(out);
  return out;
}

StandardizedEffect standardize_effect(const IpdTrial& source,
                                      const PropensityRatioFit& fit,
                                      EffectScale scale) {
  if (!fit.converged) {
    throw NumericalError("cannot standardize with a non-converged weight fit");
  }
  if (fit.weights.size() != source.size()) {
    throw ValidationError("weight vector does not match the source trial");
  }
  std::array<double, 2> num{};
  std::array<double, 2> den{};
  for (Index i = 0; i < source.size(); ++i) {
    const auto x = static_cast<std::size_t>(source.treatment[i]);
    num[x] += fit.weights[i] * source.outcome[i];
    den[x] += fit.weights[i];
  }
  for (int x = 0; x < 2; ++x) {
    if (!(den[x] > 0.0)) {
      throw ValidationError("undefined estimand: arm " + std::to_string(x) +
                            " has zero total weight");
    }
  }
  StandardizedEffect eff;
  eff.target = fit.target;
  eff.source = fit.source;
  eff.scale = scale;
  eff.risk_treated = num[1] / den[1];
  eff.risk_control = num[0] / den[0];
  eff.estimate = effect_from_risks(scale, eff.risk_treated, eff.risk_control);
  return eff;
}

double horvitz_thompson_difference(const IpdTrial& source,
                                   const PropensityRatioFit& fit, double r1) {
  if (!(r1 > 0.0 && r1 < 1.0)) {
    throw ValidationError("allocation probability must lie in (0, 1)");
  }
  const double r0 = 1.0 - r1;
  double total = 0.0;
  for (Index i = 0; i < source.size(); ++i) {
    const double x = source.treatment[i];
    total += fit.weights[i] * source.outcome[i] * ((1.0 / r1 + 1.0 / r0) * x - 1.0 / r0);
  }
  return total / static_cast<double>(source.size());
}

WeightsSummary summarize_weights(const Vector& weights) {
  WeightsSummary s;
  if (weights.size() == 0) return s;
  s.min = weights.minCoeff();
  s.max = weights.maxCoeff();
  s.p95 = quantile_inverse_cdf(
      std::span<const double>(weights.data(), static_cast<std::size_t>(weights.size())),
      0.95);
  s.ess = weights.sum() * weights.sum() / weights.squaredNorm();
  return s;
}

nlohmann::json to_json(const PropensityRatioFit& fit) {
  const auto ws = summarize_weights(fit.weights);
  nlohmann::json out = {
      {"j", fit.target},
      {"k", fit.source},
      {"beta", std::vector<double>(fit.beta.data(), fit.beta.data() + fit.beta.size())},
      {"objective", fit.objective},
      {"converged", fit.converged},
      {"weights_summary",
       {{"min", ws.min}, {"max", ws.max}, {"p95", ws.p95}, {"ess", ws.ess}}},
      {"model", fit.model.to_string()},
      {"moments", fit.moments.to_string()},
      {"iterations", fit.iterations},
  };
  if (fit.truncation_cap) {
    out["truncation"] = {{"percentile", fit.truncation_percentile},
                         {"cap", *fit.truncation_cap}};
  }
  return out;
}

}  // namespace causalmeta
