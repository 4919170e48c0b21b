#pragma once

// Command configs: JSON defaults, overridden by a JSON file, overridden by
// flags. Every default key doubles as a flag (--key-name) and unknown file
// keys are rejected.

#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

namespace gsq::cli {

using Json = nlohmann::ordered_json;

class CommandConfig {
 public:
  explicit CommandConfig(Json defaults);

  /// Adds --config plus one option per key to `app`.
  void bind(CLI::App& app);
  /// Defaults <- config file <- flags. Throws ConfigError.
  Json resolve() const;

 private:
  Json defaults_;
  std::string config_path_;
  std::map<std::string, std::string> flag_text_;
  std::map<std::string, CLI::Option*> flag_opts_;
};

/// Coerces `value` to the JSON type of `prototype`; `key` names errors.
Json coerce(const std::string& key, const Json& value, const Json& prototype);
/// Same, from flag text. Arrays are comma separated.
Json coerce_text(const std::string& key, const std::string& text, const Json& prototype);

}  // namespace gsq::cli
