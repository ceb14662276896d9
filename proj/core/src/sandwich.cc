#include "causalmeta/sandwich.h"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <set>
#include <sstream>

#include "causalmeta/json_util.h"

namespace causalmeta {

namespace {

double condition_number(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 0.0;
  const double lo = s[s.size() - 1];
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return s[0] / lo;
}

// Power-of-two row and column scales D_r, D_c with D_r B D_c of unit
// row/column maxima. Exact in floating point, so only units are removed.
struct Equilibration {
  Vector row;
  Vector col;
};

double pow2_inverse(double v) {
  return v > 0.0 && std::isfinite(v) ? std::ldexp(1.0, -std::ilogb(v)) : 1.0;
}

Equilibration equilibrate(const Matrix& m) {
  Equilibration e{Vector::Ones(m.rows()), Vector::Ones(m.cols())};
  for (Index i = 0; i < m.rows(); ++i) e.row[i] = pow2_inverse(m.row(i).cwiseAbs().maxCoeff());
  const Matrix scaled = e.row.asDiagonal() * m;
  for (Index j = 0; j < m.cols(); ++j) e.col[j] = pow2_inverse(scaled.col(j).cwiseAbs().maxCoeff());
  return e;
}

// Condition number after equilibration.
double scaled_condition(const Matrix& m) {
  const auto e = equilibrate(m);
  return condition_number(e.row.asDiagonal() * m * e.col.asDiagonal());
}

int term_degree(const BasisTerm& t) {
  switch (t.kind) {
    case BasisTerm::Kind::kConstant: return 0;
    case BasisTerm::Kind::kLinear: return 1;
    default: return 2;
  }
}

// Covariate indices of a term, with multiplicity.
std::vector<int> term_factors(const BasisTerm& t) {
  switch (t.kind) {
    case BasisTerm::Kind::kConstant: return {};
    case BasisTerm::Kind::kLinear: return {t.a};
    case BasisTerm::Kind::kSquare: return {t.a, t.a};
    case BasisTerm::Kind::kInteraction: return {t.a, t.b};
  }
  return {};
}

}  // namespace

TargetMoments target_moments_from_rows(int study, const Matrix& covariates,
                                       const BasisSpec& moments) {
  if (covariates.rows() == 0) {
    throw ValidationError("insufficient aggregated data: no rows for study " +
                          std::to_string(study));
  }
  moments.check_covariates(covariates.cols());
  const Matrix phi = moments.design(covariates);
  TargetMoments out;
  out.study = study;
  out.size = static_cast<double>(covariates.rows());
  out.basis_second_moment = phi.transpose() * phi / out.size;
  return out;
}

TargetMoments target_moments_from_reconstruction(const ReconstructedMoments& m,
                                                 double size,
                                                 const BasisSpec& moments) {
  const Index p = m.mean.size();
  if (p == 0 || m.covariance.rows() != p) {
    throw ValidationError("insufficient aggregated data: cov(L|S=" +
                          std::to_string(m.target) + ") required");
  }
  moments.check_covariates(p);
  const Matrix raw2 = m.covariance + m.mean * m.mean.transpose();
  const auto& terms = moments.terms();
  const auto d = moments.size();
  TargetMoments out;
  out.study = m.target;
  out.size = size;
  out.basis_second_moment.resize(d, d);
  for (Index a = 0; a < d; ++a) {
    for (Index b = 0; b < d; ++b) {
      const auto& ta = terms[static_cast<std::size_t>(a)];
      const auto& tb = terms[static_cast<std::size_t>(b)];
      if (term_degree(ta) + term_degree(tb) > 2) {
        throw ValidationError(
            "insufficient aggregated data: E{phi phi'|S=" + std::to_string(m.target) +
            "} needs moments above order two for basis " + moments.to_string());
      }
      auto f = term_factors(ta);
      const auto g = term_factors(tb);
      f.insert(f.end(), g.begin(), g.end());
      double v = 1.0;
      if (f.size() == 1) v = m.mean[f[0]];
      if (f.size() == 2) v = raw2(f[0], f[1]);
      out.basis_second_moment(a, b) = v;
    }
  }
  return out;
}

EstimatingStack::EstimatingStack(const IpdTrial& source,
                                 std::vector<StackTarget> targets,
                                 double pooled_size, EffectScale scale)
    : source_(source), pooled_size_(pooled_size), scale_(scale) {
  if (targets.empty()) throw ValidationError("estimating stack needs a target");
  const auto nk = static_cast<double>(source.size());
  if (!(pooled_size >= nk)) {
    throw ValidationError("pooled size is smaller than the source trial");
  }
  std::set<int> seen;
  Index offset = 0;
  for (auto& t : targets) {
    if (t.fit.source != source.study_id) {
      throw ValidationError("fit for source " + std::to_string(t.fit.source) +
                            " given to the stack of source " +
                            std::to_string(source.study_id));
    }
    if (!seen.insert(t.fit.target).second) {
      throw ValidationError("duplicate target " + std::to_string(t.fit.target));
    }
    if (t.fit.weights.size() != source.size()) {
      throw ValidationError("weights do not match source trial " +
                            std::to_string(source.study_id));
    }
    Block b;
    b.target = t.fit.target;
    b.identity = t.fit.is_identity();
    b.target_size = b.identity ? nk : t.target_size;
    if (!b.identity) {
      if (!t.fit.converged) {
        throw NumericalError("weight fit " + std::to_string(b.target) + "<-" +
                             std::to_string(source.study_id) + " did not converge");
      }
      if (!(b.target_size > 0.0)) {
        throw ValidationError("target " + std::to_string(b.target) + " has no size");
      }
      b.ratio_scale = b.target_size / nk;
      b.psi = t.fit.model.design(source.covariates);
      b.phi = t.fit.moments.design(source.covariates);
      b.num_beta = b.psi.cols();
    }
    b.fit = std::move(t.fit);
    b.offset = offset;
    offset += b.num_beta + 3;
    blocks_.push_back(std::move(b));
  }
  dim_ = offset;

  estimate_.resize(dim_);
  for (auto& b : blocks_) {
    if (!b.identity) {
      estimate_.segment(b.offset, b.num_beta) = b.fit.beta;
      const Vector m = ratio(b, b.fit.beta);
      b.jacobian = b.phi.transpose() * m.asDiagonal() * b.psi / pooled_size_;
      // Exactly identified: any invertible projection gives the same theta
      // covariance, and the identity avoids squaring the condition of A.
      b.projection = b.phi.cols() == b.psi.cols()
                         ? Matrix(Matrix::Identity(b.phi.cols(), b.phi.cols()))
                         : b.jacobian;
    }
    const auto eff = standardize_effect(source_, b.fit, scale_);
    estimate_[b.offset + b.num_beta] = eff.risk_treated;
    estimate_[b.offset + b.num_beta + 1] = eff.risk_control;
    estimate_[b.offset + b.num_beta + 2] = eff.estimate;
  }
}

std::vector<int> EstimatingStack::targets() const {
  std::vector<int> out;
  for (const auto& b : blocks_) out.push_back(b.target);
  return out;
}

std::vector<Index> EstimatingStack::theta_indices() const {
  std::vector<Index> out;
  for (const auto& b : blocks_) out.push_back(b.offset + b.num_beta + 2);
  return out;
}

Vector EstimatingStack::theta() const {
  const auto idx = theta_indices();
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = estimate_[idx[i]];
  return out;
}

Index EstimatingStack::beta_offset(int target) const {
  return block_for(target).offset;
}

const EstimatingStack::Block& EstimatingStack::block_for(int target) const {
  for (const auto& b : blocks_) {
    if (b.target == target) return b;
  }
  throw ValidationError("target " + std::to_string(target) + " is not in the stack of source " +
                        std::to_string(source_.study_id));
}

Vector EstimatingStack::ratio(const Block& b, const Vector& beta) const {
  if (b.identity) return Vector::Ones(source_.size());
  return (b.psi * beta).array().exp().matrix() * b.ratio_scale;
}

Vector EstimatingStack::truncated_ratio(
    const Block& b, const Vector& beta,
    Eigen::Array<bool, Eigen::Dynamic, 1>* capped) const {
  const Index n = source_.size();
  if (capped) capped->setConstant(n, false);
  if (b.identity) return Vector::Ones(n);
  Vector raw = (b.psi * beta).array().exp().matrix();
  if (b.fit.truncation_cap) {
    // The cap is held at its fitted value.
    const double cap = *b.fit.truncation_cap;
    for (Index i = 0; i < n; ++i) {
      if (raw[i] >= cap) {
        raw[i] = cap;
        if (capped) (*capped)[i] = true;
      }
    }
  }
  return raw * b.ratio_scale;
}

Matrix EstimatingStack::source_rows(const Vector& params) const {
  const Index n = source_.size();
  Matrix rows = Matrix::Zero(n, dim_);
  for (const auto& b : blocks_) {
    const Index mu = b.offset + b.num_beta;
    const Vector beta = params.segment(b.offset, b.num_beta);
    if (!b.identity) {
      const Vector m = ratio(b, beta);
      rows.middleCols(b.offset, b.num_beta) =
          m.asDiagonal() * (b.phi * b.projection);
    }
    const Vector mt = truncated_ratio(b, beta, nullptr);
    const double mu1 = params[mu];
    const double mu0 = params[mu + 1];
    const double g = effect_from_risks(scale_, mu1, mu0) - params[mu + 2];
    for (Index i = 0; i < n; ++i) {
      const int x = source_.treatment[i];
      const double y = source_.outcome[i];
      if (x == 1) {
        rows(i, mu) = mt[i] * (y - mu1);
      } else {
        rows(i, mu + 1) = mt[i] * (y - mu0);
      }
      rows(i, mu + 2) = g;
    }
  }
  return rows;
}

Matrix EstimatingStack::target_rows(int target, const Matrix& covariates,
                                    const Vector& /*params*/) const {
  const auto& b = block_for(target);
  Matrix rows = Matrix::Zero(covariates.rows(), dim_);
  if (b.identity) return rows;
  const Matrix phi = b.fit.moments.design(covariates);
  rows.middleCols(b.offset, b.num_beta) = -phi * b.projection;
  return rows;
}

Vector EstimatingStack::mean_estimating_function(
    const Vector& params, const std::map<int, Matrix>& target_covariates) const {
  Vector total = source_rows(params).colwise().sum().transpose();
  for (const auto& b : blocks_) {
    if (b.identity) continue;
    const auto it = target_covariates.find(b.target);
    if (it == target_covariates.end()) {
      throw ValidationError("insufficient aggregated data: cov(L|S=" +
                            std::to_string(b.target) + ") required");
    }
    total += target_rows(b.target, it->second, params).colwise().sum().transpose();
  }
  total /= pooled_size_;
  // The effect equation is deterministic in the arm means.
  for (const auto& b : blocks_) {
    const Index mu = b.offset + b.num_beta;
    total[mu + 2] = effect_from_risks(scale_, params[mu], params[mu + 1]) - params[mu + 2];
  }
  return total;
}

Matrix EstimatingStack::bread() const {
  Matrix out = Matrix::Zero(dim_, dim_);
  const Index n = source_.size();
  for (const auto& b : blocks_) {
    const Index mu = b.offset + b.num_beta;
    const Vector beta = estimate_.segment(b.offset, b.num_beta);
    Eigen::Array<bool, Eigen::Dynamic, 1> capped;
    const Vector mt = truncated_ratio(b, beta, &capped);
    if (!b.identity) {
      out.block(b.offset, b.offset, b.num_beta, b.num_beta) =
          b.projection.transpose() * b.jacobian;
    }
    std::array<double, 2> dmu{};
    for (Index i = 0; i < n; ++i) {
      const int x = source_.treatment[i];
      const Index row = x == 1 ? mu : mu + 1;
      dmu[static_cast<std::size_t>(x)] += mt[i];
      if (!b.identity && !capped[i]) {
        const double resid = source_.outcome[i] - estimate_[row];
        out.block(row, b.offset, 1, b.num_beta) += mt[i] * resid * b.psi.row(i);
      }
    }
    if (!b.identity) out.block(mu, b.offset, 2, b.num_beta) /= pooled_size_;
    out(mu, mu) = -dmu[1] / pooled_size_;
    out(mu + 1, mu + 1) = -dmu[0] / pooled_size_;
    const auto grad = effect_gradient(scale_, estimate_[mu], estimate_[mu + 1]);
    out(mu + 2, mu) = grad[0];
    out(mu + 2, mu + 1) = grad[1];
    out(mu + 2, mu + 2) = -1.0;
  }
  return out;
}

Matrix EstimatingStack::meat(const std::map<int, TargetMoments>& target_moments) const {
  const Matrix s = source_rows(estimate_);
  Matrix out = s.transpose() * s / pooled_size_;
  for (const auto& b : blocks_) {
    if (b.identity) continue;
    const auto it = target_moments.find(b.target);
    if (it == target_moments.end()) {
      throw ValidationError("insufficient aggregated data: cov(L|S=" +
                            std::to_string(b.target) + ") required");
    }
    const auto& e = it->second.basis_second_moment;
    if (e.rows() != b.phi.cols() || e.cols() != b.phi.cols()) {
      throw ValidationError("target moments for study " + std::to_string(b.target) +
                            " do not match the moment basis");
    }
    out.block(b.offset, b.offset, b.num_beta, b.num_beta) +=
        (it->second.size / pooled_size_) * b.projection.transpose() * e * b.projection;
  }
  return out;
}

Matrix EstimatingStack::meat_by_stacking(
    const std::map<int, Matrix>& target_covariates) const {
  Matrix stacked = source_rows(estimate_);
  for (const auto& b : blocks_) {
    if (b.identity) continue;
    const auto it = target_covariates.find(b.target);
    if (it == target_covariates.end()) {
      throw ValidationError("insufficient aggregated data: cov(L|S=" +
                            std::to_string(b.target) + ") required");
    }
    const Matrix t = target_rows(b.target, it->second, estimate_);
    Matrix grown(stacked.rows() + t.rows(), dim_);
    grown << stacked, t;
    stacked.swap(grown);
  }
  return stacked.transpose() * stacked / pooled_size_;
}

Matrix sandwich(const Matrix& bread, const Matrix& meat, double n) {
  if (bread.rows() != bread.cols() || meat.rows() != bread.rows() ||
      meat.cols() != bread.cols()) {
    throw ValidationError("bread and meat dimensions differ");
  }
  if (!(n > 0.0)) throw ValidationError("sandwich needs n > 0");
  // B^-1 M B^-T = D_c Bs^-1 (D_r M D_r) Bs^-T D_c with Bs = D_r B D_c.
  const auto e = equilibrate(bread);
  const Matrix scaled = e.row.asDiagonal() * bread * e.col.asDiagonal();
  const double cond = condition_number(scaled);
  if (!(cond <= 1e12)) {
    throw NumericalError("singular bread matrix (condition " + std::to_string(cond) + ")");
  }
  const Eigen::PartialPivLU<Matrix> lu(scaled);
  const Matrix left = lu.solve(e.row.asDiagonal() * meat * e.row.asDiagonal());
  const Matrix inner = lu.solve(left.transpose()).transpose();
  const Matrix cov = e.col.asDiagonal() * inner * e.col.asDiagonal() / n;
  Matrix sym = 0.5 * (cov + cov.transpose());
  for (Index i = 0; i < sym.rows(); ++i) {
    if (sym(i, i) < -1e-10) {
      throw NumericalError("sandwich covariance has a negative variance at index " +
                           std::to_string(i) + " (" + std::to_string(sym(i, i)) + ")");
    }
  }
  return sym;
}

namespace {

SandwichResult finish(const EstimatingStack& stack, Matrix bread, Matrix meat) {
  // Name the offending block before the global check.
  const auto targets = stack.targets();
  const auto theta_idx = stack.theta_indices();
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Index begin = stack.beta_offset(targets[t]);
    const Index len = theta_idx[t] - begin + 1;
    const double c = scaled_condition(bread.block(begin, begin, len, len));
    if (!(c <= 1e12)) {
      throw NumericalError("singular bread in the block of target " +
                           std::to_string(targets[t]) + " for source " +
                           std::to_string(stack.source()) + " (condition " +
                           std::to_string(c) + ")");
    }
  }
  SandwichResult r;
  r.source = stack.source();
  r.targets = targets;
  r.bread_condition = scaled_condition(bread);
  r.covariance = sandwich(bread, meat, stack.pooled_size());
  r.bread = std::move(bread);
  r.meat = std::move(meat);
  r.theta = stack.theta();
  const auto m = static_cast<Index>(theta_idx.size());
  r.theta_covariance.resize(m, m);
  for (Index a = 0; a < m; ++a) {
    for (Index b = 0; b < m; ++b) {
      r.theta_covariance(a, b) = r.covariance(theta_idx[static_cast<std::size_t>(a)],
                                              theta_idx[static_cast<std::size_t>(b)]);
    }
  }
  r.min_eigenvalue = min_eigenvalue(r.theta_covariance);
  return r;
}

}  // namespace

SandwichResult sandwich(const EstimatingStack& stack,
                        const std::map<int, TargetMoments>& target_moments) {
  return finish(stack, stack.bread(), stack.meat(target_moments));
}

SandwichResult sandwich_by_stacking(const EstimatingStack& stack,
                                    const std::map<int, Matrix>& target_covariates) {
  return finish(stack, stack.bread(), stack.meat_by_stacking(target_covariates));
}

nlohmann::json to_json(const SandwichResult& result) {
  return {{"source_k", result.source},
          {"targets", result.targets},
          {"theta", vector_to_json(result.theta)},
          {"cov", matrix_to_json(result.theta_covariance)},
          {"diagnostics",
           {{"bread_cond", result.bread_condition}, {"min_eig", result.min_eigenvalue}}}};
}

EffectTable assemble_effect_covariance(int q, int z,
                                       std::span<const SandwichResult> per_source,
                                       std::span<const AggregatedTrial> aggregated) {
  EffectTable table;
  table.q = q;
  table.z = z;
  std::vector<double> var;
  struct Slot {
    int source;
    std::size_t pos;  // index into SandwichResult::targets, or npos
  };
  std::vector<Slot> slots;
  std::map<int, const SandwichResult*> by_source;
  for (const auto& r : per_source) {
    if (!by_source.emplace(r.source, &r).second) {
      throw ValidationError("two sandwich results for source " + std::to_string(r.source));
    }
  }
  std::map<int, const AggregatedTrial*> agg;
  for (const auto& a : aggregated) agg[a.study_id] = &a;

  for (int k = 1; k <= q; ++k) {
    if (k <= z) {
      const auto it = agg.find(k);
      if (it == agg.end() || !(it->second->own_effect.se > 0.0)) {
        throw ValidationError("missing diagonal SE for aggregated study " + std::to_string(k));
      }
      table.entries.push_back({k, k, it->second->own_effect.estimate});
      slots.push_back({k, std::string::npos});
      var.push_back(it->second->own_effect.se * it->second->own_effect.se);
      continue;
    }
    const auto it = by_source.find(k);
    if (it == by_source.end()) {
      throw ValidationError("missing sandwich result for source " + std::to_string(k));
    }
    const auto& r = *it->second;
    for (int j = 1; j <= q; ++j) {
      const auto pos = std::find(r.targets.begin(), r.targets.end(), j);
      if (pos == r.targets.end()) {
        if (j == k) {
          throw ValidationError("sandwich result for source " + std::to_string(k) +
                                " lacks its own population");
        }
        continue;  // pair skipped upstream
      }
      const auto p = static_cast<std::size_t>(pos - r.targets.begin());
      table.entries.push_back({j, k, r.theta[static_cast<Index>(p)]});
      slots.push_back({k, p});
      var.push_back(0.0);
    }
  }
  const auto m = static_cast<Index>(slots.size());
  table.sigma = Matrix::Zero(m, m);
  for (Index a = 0; a < m; ++a) {
    const auto& sa = slots[static_cast<std::size_t>(a)];
    if (sa.pos == std::string::npos) {
      table.sigma(a, a) = var[static_cast<std::size_t>(a)];
      continue;
    }
    const auto& r = *by_source.at(sa.source);
    for (Index b = 0; b < m; ++b) {
      const auto& sb = slots[static_cast<std::size_t>(b)];
      if (sb.source != sa.source || sb.pos == std::string::npos) continue;
      table.sigma(a, b) = r.theta_covariance(static_cast<Index>(sa.pos),
                                             static_cast<Index>(sb.pos));
    }
  }
  // Cells sharing the target population but not the source are independent
  // too; the table stores them as zero.
  table.validate();
  return table;
}

}  // namespace causalmeta
