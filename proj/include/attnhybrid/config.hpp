#pragma once
// Flat "key = value" text files; '#' starts a comment, lists are
// comma-separated.

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnhybrid {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& origin = "<config>") {
    KeyValueConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                    ": expected 'key = value'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      if (key.empty()) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[key] = trim(trimmed.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig parse_text(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("config: missing key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    return has(key) ? to_double(key, require(key)) : fallback;
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? to_uint(key, require(key)) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = require(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("config: '" + key + "' expects a boolean, got '" + v + "'");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    std::stringstream ss(require(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_list(key)) out.push_back(to_double(key, s));
    return out;
  }

  std::vector<std::size_t> get_uint_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : get_list(key)) out.push_back(to_uint(key, s));
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return {};
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
  }

 private:
  static double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size()) {
      throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
    }
    return d;
  }
  static std::uint64_t to_uint(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long u = 0;
    try {
      u = std::stoull(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.find('-') != std::string::npos) {
      throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" +
                                  v + "'");
    }
    return u;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace attnhybrid
