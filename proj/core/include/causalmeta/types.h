#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace causalmeta {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;
using Index = Eigen::Index;

// Failure categories. The CLI maps these onto exit codes 2, 3 and 4.
enum class ErrorKind { kValidation, kNumerical, kInfeasible };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Bad input: malformed files, violated invariants, unsupported requests.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorKind::kValidation, what) {}
};

// Solver or linear-algebra failure.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorKind::kNumerical, what) {}
};

// The target moments cannot be reached by any finite weight model.
class InfeasibleError : public Error {
 public:
  explicit InfeasibleError(const std::string& what)
      : Error(ErrorKind::kInfeasible, what) {}
};

enum class EffectScale { kRiskDifference, kLogRelativeRisk, kLogOddsRatio };

// Accepts "rd", "risk_difference", "risk-difference", "log-rr",
// "log_relative_risk", "log-or", "log_odds_ratio".
EffectScale parse_effect_scale(std::string_view name);
std::string to_string(EffectScale scale);

// Effect contrast between two arm risks on the given scale.
double effect_from_risks(EffectScale scale, double risk_treated,
                         double risk_control);

// Partial derivatives of effect_from_risks with respect to (treated, control).
Eigen::Vector2d effect_gradient(EffectScale scale, double risk_treated,
                                double risk_control);

}  // namespace causalmeta
