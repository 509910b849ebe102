#pragma once

#include <json.hpp>

#include <string>
#include <vector>

namespace cgpattn {

/// Structural validation against the subset of JSON Schema used by the
/// shipped results schema: type, properties, required, items, enum.
/// Returns a list of violations; empty means valid.
std::vector<std::string> validate_against_schema(const nlohmann::json& doc,
                                                 const nlohmann::json& schema);

}  // namespace cgpattn
