#include "povert/config.hpp"

#include <algorithm>
#include <sstream>

#include "povert/errors.hpp"
#include "povert/io.hpp"

namespace povert::config {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValue KeyValue::parse(const std::string& text) {
  KeyValue kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + " has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (kv.values_.count(key)) throw ConfigError("duplicate config key '" + key + "'");
    kv.values_[key] = value;
  }
  return kv;
}

KeyValue KeyValue::load(const std::string& path) { return parse(io::read_text(path)); }

bool KeyValue::has(const std::string& key) const { return values_.count(key) != 0; }

std::string KeyValue::get_string(const std::string& key, const std::string& fallback) {
  known_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValue::get_double(const std::string& key, double fallback) {
  known_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not a number: " + it->second);
  }
}

int KeyValue::get_int(const std::string& key, int fallback) {
  known_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const long v = std::stol(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return static_cast<int>(v);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
  }
}

bool KeyValue::get_bool(const std::string& key, bool fallback) {
  known_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + it->second);
}

std::uint64_t KeyValue::get_u64(const std::string& key, std::uint64_t fallback) {
  known_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: " + it->second);
  }
}

void KeyValue::declare(const std::string& key) { known_.insert(key); }

void KeyValue::finish() const {
  for (const auto& [key, value] : values_)
    if (!known_.count(key)) throw ConfigError("unknown config key '" + key + "'");
}

std::string KeyValue::serialize() const {
  std::ostringstream out;
  for (const auto& [key, value] : values_) out << key << " = " << value << "\n";
  return out.str();
}

void KeyValue::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

}  // namespace povert::config
