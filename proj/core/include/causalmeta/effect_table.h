#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/types.h"

namespace causalmeta {

struct EffectEntry {
  int j = 0;  // target population
  int k = 0;  // source trial
  double estimate = 0.0;
};

// Standardized estimates theta(j, k) with their residual covariance, as
// consumed by the meta-analysis model. Only cells estimable under the IPD
// restriction are present: the diagonal, and columns k > z.
struct EffectTable {
  int q = 0;
  int z = 0;
  std::vector<EffectEntry> entries;
  Matrix sigma;

  static bool available(int q, int z, int j, int k) {
    return j >= 1 && k >= 1 && j <= q && k <= q && (j == k || k > z);
  }

  // Index into `entries`, if present.
  std::optional<std::size_t> find(int j, int k) const;

  // Checks the availability mask, dimensions, symmetry, positive
  // semi-definiteness and the zero pattern for cells that share neither
  // population nor source.
  void validate() const;

  // Builds the masked table from a full q^2 vector/matrix indexed by
  // (j - 1) * q + (k - 1).
  static EffectTable from_full(int q, int z, const Vector& theta_full,
                               const Matrix& sigma_full);
};

nlohmann::json to_json(const EffectTable& table);
EffectTable effect_table_from_json(const nlohmann::json& doc);

}  // namespace causalmeta
