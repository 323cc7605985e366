#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace cpgg {

/// Flat key=value run configuration. Keys are "section.name"; a file may
/// use [section] headers and "#" comments. Only keys that exist in
/// default_config() are accepted.
class RunConfig {
 public:
  /// Overrides an existing key; throws naming the key if it is unknown.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;

  /// Applies a config file on top of the current values.
  void merge(std::istream& in, const std::string& source);
  void merge_file(const std::filesystem::path& path);

  /// One "key = value" line per key, sorted, parseable by merge().
  std::string dump() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  friend RunConfig default_config();
  void define(const std::string& key, const std::string& value) { values_[key] = value; }

  std::map<std::string, std::string> values_;
};

/// Every tunable with its desk-scale default.
RunConfig default_config();

}  // namespace cpgg
