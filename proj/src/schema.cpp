#include "cgpattn/schema.hpp"

namespace cgpattn {

namespace {

using nlohmann::json;

bool type_matches(const json& value, const std::string& type) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "number") return value.is_number();
  if (type == "integer") return value.is_number_integer();
  if (type == "boolean") return value.is_boolean();
  if (type == "null") return value.is_null();
  return false;
}

void validate_node(const json& value, const json& schema,
                   const std::string& path, std::vector<std::string>& out) {
  if (schema.contains("type")) {
    const std::string type = schema.at("type");
    if (!type_matches(value, type)) {
      out.push_back(path + ": expected " + type);
      return;
    }
  }
  if (schema.contains("enum")) {
    bool hit = false;
    for (const auto& candidate : schema.at("enum"))
      if (candidate == value) hit = true;
    if (!hit) out.push_back(path + ": value not in enum");
  }
  if (value.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema.at("required"))
        if (!value.contains(key.get<std::string>()))
          out.push_back(path + ": missing required key " +
                        key.get<std::string>());
    if (schema.contains("properties")) {
      for (auto it = schema.at("properties").begin();
           it != schema.at("properties").end(); ++it) {
        if (value.contains(it.key()))
          validate_node(value.at(it.key()), it.value(), path + "." + it.key(),
                        out);
      }
    }
  }
  if (value.is_array() && schema.contains("items")) {
    int i = 0;
    for (const auto& item : value) {
      validate_node(item, schema.at("items"), path + "[" + std::to_string(i) + "]",
                    out);
      ++i;
    }
  }
}

}  // namespace

std::vector<std::string> validate_against_schema(const json& doc,
                                                 const json& schema) {
  std::vector<std::string> out;
  validate_node(doc, schema, "$", out);
  return out;
}

}  // namespace cgpattn
