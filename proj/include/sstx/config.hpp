#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace sstx {

// Flat key/value configuration read from a TOML-like subset:
//
//   # comment
//   [schedule]
//   kind = "linear"
//   epsilon = 0.3
//
// Section headers prefix the keys that follow ("schedule.kind"). Values are
// quoted strings, numbers or true/false.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "<config>");
  static Config load(const std::string& path);

  // "key=value" override as given on the command line.
  void set_override(std::string_view assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  // Sorted, sectioned rendering that parses back to the same values.
  std::string serialize() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace sstx
