#pragma once

// Flat `key = value` text files with `#` comments. Used for run configs,
// dataset manifests and report summaries.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "microdiff/errors.hpp"

namespace microdiff::io {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

class KeyValue {
 public:
  KeyValue() = default;

  static KeyValue parse(std::string_view text) {
    KeyValue kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      auto line = text.substr(pos, nl - pos);
      pos = nl + 1;
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      auto stripped = trim(line);
      if (stripped.empty()) continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" +
                          stripped + "'");
      }
      kv.set(trim(std::string_view(stripped).substr(0, eq)),
             trim(std::string_view(stripped).substr(eq + 1)));
    }
    return kv;
  }

  static KeyValue load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << str();
  }

  [[nodiscard]] std::string str() const {
    std::string s;
    for (const auto& [k, v] : entries_) s += k + " = " + v + "\n";
    return s;
  }

  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(key, std::move(value));
  }
  void set(const std::string& key, double value) { set(key, format_double(value)); }
  void set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }

  [[nodiscard]] bool contains(const std::string& key) const { return find(key).has_value(); }

  [[nodiscard]] std::optional<std::string> find(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    return std::nullopt;
  }

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
    return find(key).value_or(fallback);
  }

  [[nodiscard]] std::string require(const std::string& key) const {
    auto v = find(key);
    if (!v) throw ConfigError("missing key '" + key + "'");
    return *v;
  }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    auto v = find(key);
    return v ? to_double(key, *v) : fallback;
  }

  [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto v = find(key);
    if (!v) return fallback;
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || ptr != v->data() + v->size())
      throw ConfigError("key '" + key + "': not an integer: '" + *v + "'");
    return out;
  }

  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
    auto v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError("key '" + key + "': not a boolean: '" + *v + "'");
  }

  [[nodiscard]] std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    auto v = find(key);
    if (!v) return out;
    std::string_view sv = *v;
    while (!sv.empty()) {
      auto comma = sv.find(',');
      auto item = trim(sv.substr(0, comma));
      if (!item.empty()) out.push_back(to_double(key, item));
      if (comma == std::string_view::npos) break;
      sv.remove_prefix(comma + 1);
    }
    return out;
  }

  [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

 private:
  static double to_double(const std::string& key, const std::string& s) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
      throw ConfigError("key '" + key + "': not a number: '" + s + "'");
    }
    return out;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace microdiff::io
