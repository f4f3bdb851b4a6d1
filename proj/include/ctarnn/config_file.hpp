#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace ctarnn {

// Flat `key = value` file, TOML-compatible for scalars and flat arrays.
// Lines starting with '#' are comments; values may be quoted; arrays are
// written either `[a, b]` or `a,b`.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback) const;

  // Throws ConfigError naming the first key not in `known`.
  void reject_unknown(const std::set<std::string>& known) const;

  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

std::string join_list(const std::vector<std::string>& items);

}  // namespace ctarnn
