#pragma once

#include <initializer_list>
#include <vector>

#include "causalmeta/data_model.h"

namespace causalmeta::testing {

// Rows of {treat, outcome, l1, l2, ...}.
inline IpdTrial make_trial(int id, std::initializer_list<std::vector<double>> rows) {
  IpdTrial t;
  t.study_id = id;
  const auto n = static_cast<Index>(rows.size());
  const auto p = static_cast<Index>(rows.begin()->size()) - 2;
  t.covariates.resize(n, p);
  t.treatment.resize(n);
  t.outcome.resize(n);
  Index i = 0;
  for (const auto& r : rows) {
    t.treatment[i] = static_cast<int>(r[0]);
    t.outcome[i] = static_cast<int>(r[1]);
    for (Index c = 0; c < p; ++c) t.covariates(i, c) = r[static_cast<std::size_t>(c) + 2];
    ++i;
  }
  return t;
}

}  // namespace causalmeta::testing
