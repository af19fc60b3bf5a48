#include "insitu/json_schema.hpp"

#include <cmath>

namespace insitu {
namespace {

bool matches_type(const nlohmann::json& value, const std::string& type) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "boolean") return value.is_boolean();
  if (type == "null") return value.is_null();
  if (type == "number") return value.is_number();
  if (type == "integer") {
    if (value.is_number_integer()) return true;
    if (value.is_number_float()) {
      double d = value.get<double>();
      return std::isfinite(d) && std::floor(d) == d;
    }
    return false;
  }
  return true;  // unknown type names do not constrain
}

std::optional<std::string> check(const nlohmann::json& value, const nlohmann::json& schema,
                                 const std::string& where) {
  if (!schema.is_object()) return std::nullopt;

  if (auto it = schema.find("type"); it != schema.end()) {
    bool ok = false;
    if (it->is_string()) {
      ok = matches_type(value, it->get<std::string>());
    } else if (it->is_array()) {
      for (const auto& t : *it) {
        if (t.is_string() && matches_type(value, t.get<std::string>())) ok = true;
      }
    } else {
      ok = true;
    }
    if (!ok) return where + ": expected type " + it->dump() + ", got " + value.type_name();
  }

  if (auto it = schema.find("enum"); it != schema.end() && it->is_array()) {
    bool found = false;
    for (const auto& allowed : *it) {
      if (allowed == value) found = true;
    }
    if (!found) return where + ": value not in enum";
  }

  if (value.is_object()) {
    const auto props = schema.find("properties");
    if (auto req = schema.find("required"); req != schema.end() && req->is_array()) {
      for (const auto& name : *req) {
        if (name.is_string() && !value.contains(name.get<std::string>())) {
          return where + ": missing required property '" + name.get<std::string>() + "'";
        }
      }
    }
    if (props != schema.end() && props->is_object()) {
      for (const auto& [key, sub] : props->items()) {
        if (auto v = value.find(key); v != value.end()) {
          if (auto err = check(*v, sub, where + "." + key)) return err;
        }
      }
    }
    if (auto extra = schema.find("additionalProperties");
        extra != schema.end() && extra->is_boolean() && !extra->get<bool>()) {
      for (const auto& [key, _] : value.items()) {
        if (props == schema.end() || !props->contains(key)) {
          return where + ": unexpected property '" + key + "'";
        }
      }
    }
  }

  if (value.is_array()) {
    if (auto items = schema.find("items"); items != schema.end() && items->is_object()) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (auto err = check(value[i], *items, where + "[" + std::to_string(i) + "]")) return err;
      }
    }
  }
  return std::nullopt;
}

}  // namespace

std::optional<std::string> schema_violation(const nlohmann::json& value, const nlohmann::json& schema) {
  return check(value, schema, "$");
}

bool is_object_schema(const nlohmann::json& schema) {
  return schema.is_object() && schema.contains("properties") && schema["properties"].is_object();
}

}  // namespace insitu
