#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"
#include "smoe/model.hpp"
#include "smoe/train.hpp"

namespace smoe {

/// Bad config file, unknown key or unparsable value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

/// Dotted key -> raw value text.
using ConfigMap = std::map<std::string, std::string>;

/// Parses either JSON (text starting with '{') or a flat TOML subset:
/// `[section]` headers, `key = value` lines, `#` comments, quoted strings.
ConfigMap parse_config_text(std::string_view text);

/// Reads and parses a file; a relative `train.corpus` is resolved against the
/// file's directory.
ConfigMap load_config_file(const std::string& path);

/// Splits "dotted.key=value".
std::pair<std::string, std::string> parse_override(std::string_view text);

/// Sets one dotted key. `variant` and `seed` are accepted as shorthands for
/// model.variant and (model.seed, train.seed).
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

/// Applies `base` then `overrides` in order and validates.
RunConfig resolve_config(const ConfigMap& base, std::span<const std::string> overrides,
                         const RunConfig& defaults = {});

nlohmann::ordered_json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

}  // namespace smoe
