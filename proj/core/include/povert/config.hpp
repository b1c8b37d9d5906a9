#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace povert::config {

/// Strict "key = value" config file. '#' starts a comment; blank lines are
/// ignored. Every getter registers its key as known; finish() rejects any
/// present-but-never-queried key by name (ConfigError).
class KeyValue {
 public:
  static KeyValue parse(const std::string& text);
  static KeyValue load(const std::string& path);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  int get_int(const std::string& key, int fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);

  /// Mark a key as known without reading it.
  void declare(const std::string& key);

  /// Throws ConfigError naming the first unknown key, if any.
  void finish() const;

  /// Canonical (sorted) "key = value" serialization of the stored pairs.
  std::string serialize() const;

  void set(const std::string& key, const std::string& value);

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> known_;
};

}  // namespace povert::config
