#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace iclprobe {

// Flat "key = value" text. '#' starts a comment; blank lines are ignored; keys are unique.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);  // ConfigError, line-tagged

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value);

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<long long> get_int_list(const std::string& key) const;
  std::vector<long long> get_int_list(const std::string& key, std::vector<long long> fallback) const;

  // Keys that were never read; lets callers reject typos.
  std::vector<std::string> unused_keys() const;
  // Throws ConfigError naming the first key not in `allowed`.
  void require_known(const std::set<std::string>& allowed) const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  int line_of(const std::string& key) const;

 private:
  [[noreturn]] void bad_value(const std::string& key, const std::string& expected) const;
  const std::string& raw(const std::string& key) const;

  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  mutable std::set<std::string> used_;
};

}  // namespace iclprobe
