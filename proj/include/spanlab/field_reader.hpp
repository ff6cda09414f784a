#pragma once

#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

namespace spanlab {

/// Reads typed fields from one JSON object and records every problem instead
/// of stopping at the first.
class FieldReader {
 public:
  FieldReader(const nlohmann::ordered_json& obj, std::string prefix, std::vector<std::string>& problems)
      : obj_(obj), prefix_(std::move(prefix)), problems_(problems) {
    if (!obj_.is_object()) problems_.push_back(where("") + " must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.template get<long long>() < 0) {
            throw std::invalid_argument("expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      out = v.template get<T>();
    } catch (const std::exception& e) {
      problems_.push_back(where(key) + ": " + e.what());
    }
  }

  /// Marks a key handled by the caller.
  const Json* take(const char* key) {
    seen_.insert(key);
    return obj_.is_object() && obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void reject_unknown() {
    if (!obj_.is_object()) return;
    for (const auto& [k, _] : obj_.items()) {
      if (seen_.count(k) == 0) problems_.push_back("unknown key " + where(k));
    }
  }

  std::string where(const std::string& key) const {
    if (prefix_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

 private:
  const nlohmann::ordered_json& obj_;
  std::string prefix_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

}  // namespace spanlab
