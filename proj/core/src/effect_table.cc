#include "causalmeta/effect_table.h"

#include <cmath>
#include <set>

#include "causalmeta/json_util.h"

namespace causalmeta {

std::optional<std::size_t> EffectTable::find(int j, int k) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].j == j && entries[i].k == k) return i;
  }
  return std::nullopt;
}

void EffectTable::validate() const {
  if (q < 1 || z < 0 || z > q) {
    throw ValidationError("effect table: need q >= 1 and 0 <= z <= q");
  }
  const auto m = static_cast<Index>(entries.size());
  if (m == 0) throw ValidationError("effect table has no entries");
  if (sigma.rows() != m || sigma.cols() != m) {
    throw ValidationError("effect table: sigma is " + std::to_string(sigma.rows()) +
                          "x" + std::to_string(sigma.cols()) + " but there are " +
                          std::to_string(m) + " entries");
  }
  std::set<std::pair<int, int>> seen;
  for (const auto& e : entries) {
    if (!available(q, z, e.j, e.k)) {
      throw ValidationError("effect table: theta(" + std::to_string(e.j) + "," +
                            std::to_string(e.k) +
                            ") is not estimable when only studies " +
                            std::to_string(z + 1) + ".." + std::to_string(q) +
                            " have participant data");
    }
    if (!seen.insert({e.j, e.k}).second) {
      throw ValidationError("effect table: duplicate entry (" + std::to_string(e.j) +
                            "," + std::to_string(e.k) + ")");
    }
    if (!std::isfinite(e.estimate)) {
      throw ValidationError("effect table: non-finite estimate");
    }
  }
  if (!sigma.allFinite()) throw ValidationError("effect table: non-finite sigma");
  const double scale = std::max(1e-300, sigma.cwiseAbs().maxCoeff());
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ValidationError("effect table: sigma is not symmetric");
  }
  for (Index a = 0; a < m; ++a) {
    for (Index b = 0; b < m; ++b) {
      const auto& ea = entries[static_cast<std::size_t>(a)];
      const auto& eb = entries[static_cast<std::size_t>(b)];
      if (ea.j != eb.j && ea.k != eb.k && sigma(a, b) != 0.0) {
        throw ValidationError("effect table: sigma couples theta(" +
                              std::to_string(ea.j) + "," + std::to_string(ea.k) +
                              ") and theta(" + std::to_string(eb.j) + "," +
                              std::to_string(eb.k) + ") which share neither index");
      }
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(sigma, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-10 * scale) {
    throw ValidationError("effect table: sigma is not positive semi-definite");
  }
}

EffectTable EffectTable::from_full(int q, int z, const Vector& theta_full,
                                   const Matrix& sigma_full) {
  const Index full = static_cast<Index>(q) * q;
  if (theta_full.size() != full || sigma_full.rows() != full || sigma_full.cols() != full) {
    throw ValidationError("full effect vector must have q^2 entries");
  }
  EffectTable t;
  t.q = q;
  t.z = z;
  std::vector<Index> idx;
  for (int j = 1; j <= q; ++j) {
    for (int k = 1; k <= q; ++k) {
      if (!available(q, z, j, k)) continue;
      const Index i = static_cast<Index>(j - 1) * q + (k - 1);
      t.entries.push_back({j, k, theta_full[i]});
      idx.push_back(i);
    }
  }
  const auto m = static_cast<Index>(idx.size());
  t.sigma.resize(m, m);
  for (Index a = 0; a < m; ++a) {
    for (Index b = 0; b < m; ++b) {
      t.sigma(a, b) = sigma_full(idx[static_cast<std::size_t>(a)],
                                 idx[static_cast<std::size_t>(b)]);
    }
  }
  return t;
}

nlohmann::json to_json(const EffectTable& table) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : table.entries) {
    entries.push_back({{"j", e.j}, {"k", e.k}, {"est", e.estimate}});
  }
  return {{"q", table.q},
          {"z", table.z},
          {"entries", entries},
          {"sigma", matrix_to_json(table.sigma)}};
}

EffectTable effect_table_from_json(const nlohmann::json& doc) {
  EffectTable t;
  try {
    t.q = doc.at("q").get<int>();
    t.z = doc.at("z").get<int>();
    for (const auto& e : doc.at("entries")) {
      t.entries.push_back({e.at("j").get<int>(), e.at("k").get<int>(),
                           e.at("est").get<double>()});
    }
    t.sigma = matrix_from_json(doc.at("sigma"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("effect table JSON: ") + e.what());
  }
  t.validate();
  return t;
}

}  // namespace causalmeta
