#pragma once

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "l2sm/error.hpp"

namespace l2sm {

/**
 * Sectioned key/value configuration.
 *
 *   # comment            ; comment
 *   [section]
 *   key = value
 *
 * Keys are unique within a section. Values run to end of line with
 * surrounding whitespace trimmed; inline comments are not supported.
 */
class Config {
 public:
  static Config parse(std::istream& is, const std::string& origin = "config") {
    Config cfg;
    cfg.origin_ = origin;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      const std::string where = origin + ":" + std::to_string(lineno);
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) throw ConfigError(where + ": malformed section header");
        section = trim(t.substr(1, t.size() - 2));
        cfg.sections_[section];
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      if (section.empty()) throw ConfigError(where + ": key outside of any [section]");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (!cfg.sections_[section].emplace(key, trim(t.substr(eq + 1))).second) {
        throw ConfigError(where + ": duplicate key '" + key + "' in [" + section + "]");
      }
    }
    return cfg;
  }

  static Config parse_string(const std::string& text, const std::string& origin = "config") {
    std::istringstream is(text);
    return parse(is, origin);
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    Config c = parse(is, path.string());
    c.base_dir_ = path.parent_path();
    return c;
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key);
  }

  bool has_section(const std::string& section) const { return sections_.count(section) > 0; }

  const std::string& get(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end() || !s->second.count(key)) {
      throw ConfigError(origin_ + ": missing [" + section + "] " + key);
    }
    return s->second.at(key);
  }

  std::string get_or(const std::string& section, const std::string& key, const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
  }

  double get_double(const std::string& section, const std::string& key) const {
    return to_double(get(section, key), section, key);
  }
  double get_double(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
  }

  long long get_int(const std::string& section, const std::string& key) const {
    return to_int(get(section, key), section, key);
  }
  long long get_int(const std::string& section, const std::string& key, long long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const auto& v = get(section, key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(origin_ + ": [" + section + "] " + key + " must be true/false, got '" + v + "'");
  }

  /// Paths are resolved against the config file's directory.
  std::filesystem::path get_path(const std::string& section, const std::string& key) const {
    std::filesystem::path p = get(section, key);
    return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
  }

  /// Rejects keys in `section` that are not listed.
  void require_known(const std::string& section, const std::set<std::string>& known) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return;
    for (const auto& [k, v] : s->second) {
      if (!known.count(k)) throw ConfigError(origin_ + ": unknown key '" + k + "' in [" + section + "]");
    }
  }

  const std::string& origin() const { return origin_; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  double to_double(const std::string& v, const std::string& section, const std::string& key) const {
    char* end = nullptr;
    errno = 0;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno == ERANGE) {
      throw ConfigError(origin_ + ": [" + section + "] " + key + " is not a number: '" + v + "'");
    }
    return d;
  }

  long long to_int(const std::string& v, const std::string& section, const std::string& key) const {
    char* end = nullptr;
    errno = 0;
    const long long d = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || errno == ERANGE) {
      throw ConfigError(origin_ + ": [" + section + "] " + key + " is not an integer: '" + v + "'");
    }
    return d;
  }

 private:
  std::string origin_;
  std::filesystem::path base_dir_;
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace l2sm
