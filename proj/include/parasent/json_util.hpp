#pragma once

// Strict reading of JSON objects: every key must be consumed, so typos in
// config files surface as errors instead of silently using defaults.

#include <cstdint>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "parasent/errors.hpp"

namespace parasent {

using Json = nlohmann::json;

class StrictObject {
 public:
  StrictObject(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const Json& at(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(context_ + ": missing key '" + key + "'");
    return j_.at(key);
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    out = convert<T>(j_.at(key), key);
  }

  template <typename T>
  T require(const std::string& key) {
    return convert<T>(at(key), key);
  }

  std::string path(const std::string& key) const { return context_ + "." + key; }

  /// Throws on any key that was never read.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw ConfigError(context_ + ": unknown key '" + key + "'");
  }

 private:
  template <typename T>
  T convert(const Json& v, const std::string& key) const {
    const auto where = context_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
        throw ConfigError(where + ": must be non-negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
    }
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }

  const Json& j_;
  std::string context_;
  std::set<std::string> used_;
};

}  // namespace parasent
