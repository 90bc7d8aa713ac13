#pragma once

// Flat key=value run configuration. One entry per line, '#' starts a comment.
// The same keys double as command-line flags (--key value).

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "colony/train.hpp"

namespace colony {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Every recognized configuration key, in canonical order.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "depth",       "base_channels", "batchnorm",    "loss",         "w_background",
      "w_bvg_plus",  "w_bvg_minus",   "w_border",     "alpha",        "beta",
      "lr",          "batch_size",    "max_epochs",   "patience",     "seed",
      "image_size",  "augment",       "shuffle_labels"};
  return keys;
}

/// Sets one key. Unknown keys and unparsable values raise ConfigError naming
/// the key; range checks happen in RunConfig::validate.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "depth") c.unet.depth = parse_int<int>(key, value);
  else if (key == "base_channels") c.unet.base_channels = parse_int<int>(key, value);
  else if (key == "batchnorm") c.unet.batchnorm = parse_bool(key, value);
  else if (key == "loss") c.loss = parse_loss_kind(value);
  else if (key == "w_background") c.weights.background = parse_real(key, value);
  else if (key == "w_bvg_plus") c.weights.bvg_plus = parse_real(key, value);
  else if (key == "w_bvg_minus") c.weights.bvg_minus = parse_real(key, value);
  else if (key == "w_border") c.weights.border = parse_real(key, value);
  else if (key == "alpha") c.alpha = parse_real(key, value);
  else if (key == "beta") c.beta = parse_real(key, value);
  else if (key == "lr") c.lr = parse_real(key, value);
  else if (key == "batch_size") c.batch_size = parse_int<int>(key, value);
  else if (key == "max_epochs") c.max_epochs = parse_int<int>(key, value);
  else if (key == "patience") c.patience = parse_int<int>(key, value);
  else if (key == "seed") c.seed = parse_int<std::uint64_t>(key, value);
  else if (key == "image_size") c.image_size = parse_int<int>(key, value);
  else if (key == "augment") c.augment = parse_bool(key, value);
  else if (key == "shuffle_labels") c.shuffle_labels = parse_bool(key, value);
  else throw ConfigError(key, "unknown configuration key");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  using detail::fmt_real;
  if (key == "depth") return std::to_string(c.unet.depth);
  if (key == "base_channels") return std::to_string(c.unet.base_channels);
  if (key == "batchnorm") return c.unet.batchnorm ? "true" : "false";
  if (key == "loss") return to_string(c.loss);
  if (key == "w_background") return fmt_real(c.weights.background);
  if (key == "w_bvg_plus") return fmt_real(c.weights.bvg_plus);
  if (key == "w_bvg_minus") return fmt_real(c.weights.bvg_minus);
  if (key == "w_border") return fmt_real(c.weights.border);
  if (key == "alpha") return fmt_real(c.alpha);
  if (key == "beta") return fmt_real(c.beta);
  if (key == "lr") return fmt_real(c.lr);
  if (key == "batch_size") return std::to_string(c.batch_size);
  if (key == "max_epochs") return std::to_string(c.max_epochs);
  if (key == "patience") return std::to_string(c.patience);
  if (key == "seed") return std::to_string(c.seed);
  if (key == "image_size") return std::to_string(c.image_size);
  if (key == "augment") return c.augment ? "true" : "false";
  if (key == "shuffle_labels") return c.shuffle_labels ? "true" : "false";
  throw ConfigError(key, "unknown configuration key");
}

using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

/// Parses key=value lines. Duplicate keys: the last one wins.
inline ConfigOverrides parse_config_text(const std::string& text) {
  ConfigOverrides out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(t, "line " + std::to_string(lineno) + ": expected key=value");
    }
    out.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return out;
}

/// Builds a validated RunConfig: defaults, then file entries, then flags.
inline RunConfig make_config(const ConfigOverrides& file_values, const ConfigOverrides& flags) {
  RunConfig c;
  for (const auto& [k, v] : file_values) set_config_value(c, k, v);
  for (const auto& [k, v] : flags) set_config_value(c, k, v);
  c.validate();
  return c;
}

inline ConfigOverrides read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline RunConfig parse_config(const std::string& text, const ConfigOverrides& flags = {}) {
  return make_config(parse_config_text(text), flags);
}

inline std::string to_config_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k + "=" + get_config_value(c, k) + "\n";
  return out;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : config_keys()) j[k] = get_config_value(c, k);
  return j;
}

}  // namespace colony
