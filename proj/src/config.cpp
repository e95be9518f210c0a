#include "bnn/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bnn/error.hpp"

namespace bnn {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config key '" + key + "': expected " + what + ", got '" + value + "'");
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = trim(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(where + "empty key");
    const std::string full = section.empty() ? key : section + "." + key;
    if (c.has(full)) throw ConfigError(where + "duplicate key '" + full + "'");
    c.values_[full] = trim(std::string_view(line).substr(eq + 1));
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Config::require(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  const std::string v = require(key);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out))
    bad_value(key, v, "a finite number");
  return out;
}

std::size_t Config::get_size(const std::string& key, std::size_t fallback) const {
  return has(key) ? parse_integer<std::size_t>(key, require(key)) : fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? parse_integer<std::uint64_t>(key, require(key)) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = require(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string> Config::get_list(const std::string& key, const std::vector<std::string>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<std::string> out;
  const std::string v = require(key);
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(trim(std::string_view(v).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (out.back().empty()) bad_value(key, v, "a comma-separated list");
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<std::size_t> Config::get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<std::size_t> out;
  for (const auto& item : get_list(key, {})) out.push_back(parse_integer<std::size_t>(key, item));
  return out;
}

std::string Config::dump() const {
  std::ostringstream os;
  std::string current;
  bool first = true;
  // Top-level keys first so they are not captured by a section.
  for (const auto& [k, v] : values_)
    if (k.find('.') == std::string::npos) {
      os << k << " = " << v << "\n";
      first = false;
    }
  for (const auto& [k, v] : values_) {
    const auto dot = k.find('.');
    if (dot == std::string::npos) continue;
    const std::string section = k.substr(0, dot);
    if (section != current) {
      os << (first ? "" : "\n") << "[" << section << "]\n";
      current = section;
      first = false;
    }
    os << k.substr(dot + 1) << " = " << v << "\n";
  }
  return os.str();
}

}  // namespace bnn
