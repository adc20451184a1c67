#pragma once

// Flat `key = value` configuration with dotted keys. Every recognized key has
// a default; unknown keys are rejected so typos surface as config errors.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace htsc {

class Config {
 public:
  /// All defaults.
  Config();

  static Config parse(std::string_view text);
  static Config load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  /// Applies "key=value" overrides, e.g. from the command line.
  void apply(const std::vector<std::string>& overrides);

  const std::string& str(const std::string& key) const;
  double num(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  bool flag(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Sorted "key = value" lines; parse(canonical()) round-trips.
  std::string canonical() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;

 private:
  std::map<std::string, std::string> values_;
};

std::string hex64(std::uint64_t v);

}  // namespace htsc
