#include <cmath>
#include <string>

#include "causalmeta/types.h"

namespace causalmeta {

EffectScale parse_effect_scale(std::string_view name) {
  if (name == "rd" || name == "risk_difference" || name == "risk-difference") {
    return EffectScale::kRiskDifference;
  }
  if (name == "log-rr" || name == "log_rr" || name == "log_relative_risk" ||
      name == "log-relative-risk") {
    return EffectScale::kLogRelativeRisk;
  }
  if (name == "log-or" || name == "log_or" || name == "log_odds_ratio" ||
      name == "log-odds-ratio") {
    return EffectScale::kLogOddsRatio;
  }
  throw ValidationError("unknown effect scale '" + std::string(name) +
                        "' (expected rd, log-rr or log-or)");
}

std::string to_string(EffectScale scale) {
  switch (scale) {
    case EffectScale::kRiskDifference:
      return "rd";
    case EffectScale::kLogRelativeRisk:
      return "log-rr";
    case EffectScale::kLogOddsRatio:
      return "log-or";
  }
  return "rd";
}

namespace {

void require_open_unit(double risk, const char* arm, bool need_below_one) {
  if (!(risk > 0.0) || (need_below_one && !(risk < 1.0))) {
    throw ValidationError(std::string("undefined estimand: ") + arm +
                          " risk " + std::to_string(risk) +
                          " is on the boundary for a log-scale contrast");
  }
}

}  // namespace

double effect_from_risks(EffectScale scale, double risk_treated,
                         double risk_control) {
  switch (scale) {
    case EffectScale::kRiskDifference:
      return risk_treated - risk_control;
    case EffectScale::kLogRelativeRisk:
      require_open_unit(risk_treated, "treated", false);
      require_open_unit(risk_control, "control", false);
      return std::log(risk_treated) - std::log(risk_control);
    case EffectScale::kLogOddsRatio:
      require_open_unit(risk_treated, "treated", true);
      require_open_unit(risk_control, "control", true);
      return std::log(risk_treated / (1.0 - risk_treated)) -
             std::log(risk_control / (1.0 - risk_control));
  }
  return 0.0;
}

Eigen::Vector2d effect_gradient(EffectScale scale, double risk_treated,
                                double risk_control) {
  switch (scale) {
    case EffectScale::kRiskDifference:
      return {1.0, -1.0};
    case EffectScale::kLogRelativeRisk:
      return {1.0 / risk_treated, -1.0 / risk_control};
    case EffectScale::kLogOddsRatio:
      return {1.0 / (risk_treated * (1.0 - risk_treated)),
              -1.0 / (risk_control * (1.0 - risk_control))};
  }
  return {0.0, 0.0};
}

}  // namespace causalmeta
