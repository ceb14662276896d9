#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "causalmeta/types.h"

namespace causalmeta {

struct BasisTerm {
  enum class Kind { kConstant, kLinear, kSquare, kInteraction };
  Kind kind = Kind::kConstant;
  int a = -1;  // zero-based covariate index
  int b = -1;  // second index for interactions (a < b)

  friend bool operator==(const BasisTerm&, const BasisTerm&) = default;
};

// A vector function of the covariates. Terms are kept in canonical order:
// constant, linear by index, squares by index, interactions lexicographic.
class BasisSpec {
 public:
  BasisSpec() = default;
  explicit BasisSpec(std::vector<BasisTerm> terms);

  // (1, L_1, ..., L_p)
  static BasisSpec main_effects(int num_covariates);
  // (1, L_1, ..., L_p, L_1^2, ..., L_p^2)
  static BasisSpec with_squares(int num_covariates);
  // Comma separated: "1,l1,l2,l1^2,l1*l2", or the shorthands "linear" and
  // "quadratic" which expand against num_covariates.
  static BasisSpec parse(std::string_view text, int num_covariates);

  Index size() const { return static_cast<Index>(terms_.size()); }
  const std::vector<BasisTerm>& terms() const { return terms_; }
  bool has_constant() const;
  bool has_interactions() const;
  bool has_squares() const;
  int max_covariate_index() const;

  // Throws ValidationError when a term refers to a covariate beyond
  // num_covariates.
  void check_covariates(Index num_covariates) const;

  Vector evaluate(const Eigen::Ref<const Vector>& covariates) const;
  // n x size() design matrix.
  Matrix design(const Matrix& covariates) const;

  std::string to_string() const;
  friend bool operator==(const BasisSpec&, const BasisSpec&) = default;

 private:
  std::vector<BasisTerm> terms_;
};

}  // namespace causalmeta
