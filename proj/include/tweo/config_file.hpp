#pragma once

#include <map>
#include <string>
#include <vector>

#include "tweo/trainer.hpp"

namespace tweo {

// Flat view of an INI-style file: "[section]" headers, "key = value" lines,
// '#' or ';' comments. Keys are stored as "section.key".
struct ConfigMap {
  std::map<std::string, std::string> values;
};

ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);

/**
 * Builds a RunConfig by layering: built-in defaults, then the file, then the
 * dotted "section.key=value" overrides (highest precedence). Any key outside
 * the registry is rejected with the full list of valid keys.
 */
RunConfig build_run_config(const ConfigMap& file, const std::vector<std::string>& overrides);

std::vector<std::string> known_config_keys();

// One line per key with its default, for --help and the README.
std::string config_reference();

}  // namespace tweo
