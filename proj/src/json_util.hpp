#pragma once

// Internal helpers shared by the run-config and target-table readers.

#include <map>
#include <string>
#include <string_view>

#include "json.hpp"
#include "polyhistor/peft.hpp"

namespace polyhistor::detail {

/// Parsed document plus the 1-based line where each value starts, keyed by JSON pointer.
class JsonSource {
 public:
  /// Throws ConfigError with the offending line on malformed input.
  JsonSource(std::string_view text, std::string origin);

  const nlohmann::json& root() const { return root_; }
  std::size_t line(const std::string& pointer) const;
  /// "origin:line: pointer: message"
  [[noreturn]] void fail(const std::string& pointer, const std::string& message) const;
  void require_keys(const nlohmann::json& object, const std::string& pointer,
                    std::initializer_list<std::string_view> allowed) const;

 private:
  std::string origin_;
  nlohmann::json root_;
  std::map<std::string, std::size_t> lines_;
};

std::string child(const std::string& pointer, std::string_view key);
std::string child(const std::string& pointer, std::size_t index);

/// Reads {"method": ..., "rho": ..., "rank": ..., "k": ..., "placement": [...], ...};
/// unspecified fields take MethodConfig::defaults(method).
MethodConfig method_from_json(const JsonSource& src, const nlohmann::json& j, const std::string& pointer);
nlohmann::ordered_json method_to_json(const MethodConfig& m);

}  // namespace polyhistor::detail
