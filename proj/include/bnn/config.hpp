#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace bnn {

// Flat key=value text with [section] headers. Keys inside a section are
// stored as "section.key". '#' and ';' start comment lines.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "<config>");
  static Config load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Typed getters throw ConfigError naming the key on a bad value.
  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated list; an empty value gives an empty list.
  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const;
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  // Sections in key order, re-parseable by parse().
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace bnn
