#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>

namespace insitu {

// Validates `value` against the subset of JSON Schema that tool requests use:
// type (single or list), properties, required, items, enum and
// additionalProperties=false. Unknown keywords are ignored.
// Returns a description of the first violation, or nullopt when valid.
std::optional<std::string> schema_violation(const nlohmann::json& value, const nlohmann::json& schema);

// True when `schema` is an object schema with a "properties" object.
bool is_object_schema(const nlohmann::json& schema);

}  // namespace insitu
