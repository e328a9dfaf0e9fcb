#pragma once

// Validator for the JSON Schema keywords the response schemas use: type,
// enum, required, properties, additionalProperties (boolean), items,
// minItems, maxItems, minimum, maximum and local "#/definitions/..." refs.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace schema {

class Validator {
 public:
  explicit Validator(nlohmann::json root) : root_(std::move(root)) {}

  // Empty when `doc` conforms; otherwise one message per problem, with a JSON pointer.
  std::vector<std::string> check(const nlohmann::json& doc) const {
    std::vector<std::string> errors;
    visit(root_, doc, "", errors);
    return errors;
  }

 private:
  const nlohmann::json& resolve(const nlohmann::json& s) const {
    if (!s.contains("$ref")) return s;
    const auto ref = s["$ref"].get<std::string>();
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0) throw std::invalid_argument("unsupported $ref " + ref);
    return root_.at("definitions").at(ref.substr(prefix.size()));
  }

  static bool has_type(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    throw std::invalid_argument("unsupported type " + t);
  }

  void visit(const nlohmann::json& schema, const nlohmann::json& v, const std::string& at,
             std::vector<std::string>& errors) const {
    const auto& s = resolve(schema);
    const std::string where = at.empty() ? "/" : at;
    if (s.contains("type") && !has_type(v, s["type"].get<std::string>())) {
      errors.push_back(where + ": expected " + s["type"].get<std::string>());
      return;
    }
    if (s.contains("enum") && std::find(s["enum"].begin(), s["enum"].end(), v) == s["enum"].end()) {
      errors.push_back(where + ": " + v.dump() + " not in enum");
    }
    if (v.is_number()) {
      if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) errors.push_back(where + ": below minimum");
      if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) errors.push_back(where + ": above maximum");
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) errors.push_back(where + ": too few items");
      if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) errors.push_back(where + ": too many items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) visit(s["items"], v[i], at + "/" + std::to_string(i), errors);
    }
    if (v.is_object()) {
      for (const auto& r : s.value("required", nlohmann::json::array()))
        if (!v.contains(r.get<std::string>())) errors.push_back(where + ": missing " + r.get<std::string>());
      const auto props = s.value("properties", nlohmann::json::object());
      for (const auto& [k, child] : v.items()) {
        if (props.contains(k)) {
          visit(props[k], child, at + "/" + k, errors);
        } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
          errors.push_back(where + ": unexpected property " + k);
        }
      }
    }
  }

  nlohmann::json root_;
};

}  // namespace schema
