#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/types.h"

namespace causalmeta {

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& rows);
nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& values);

// Every artifact written by the tools carries this version.
inline constexpr int kSchemaVersion = 1;

}  // namespace causalmeta
