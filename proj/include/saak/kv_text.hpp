#pragma once

// Line-oriented `key = value` text used for configs, sidecar metadata,
// masks and machine-readable reports. The first two entries of every
// persisted document are `format` and `version`.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "saak/error.hpp"

namespace saak {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  for (int precision = 6; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  const std::string s = trim(text);
  T value{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    value = static_cast<T>(std::strtod(s.c_str(), &end));
    if (s.empty() || end != s.c_str() + s.size()) {
      throw FormatError("cannot parse '" + s + "' as a number for " + std::string(what));
    }
  } else {
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      throw FormatError("cannot parse '" + s + "' as an integer for " + std::string(what));
    }
  }
  return value;
}

class KvDocument {
 public:
  KvDocument() = default;
  KvDocument(std::string format, int version) {
    set("format", std::move(format));
    set("version", std::to_string(version));
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
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void set(const std::string& key, T value) {
    if constexpr (std::is_same_v<T, bool>) {
      set(key, std::string(value ? "true" : "false"));
    } else if constexpr (std::is_floating_point_v<T>) {
      set(key, format_double(static_cast<double>(value)));
    } else {
      set(key, std::to_string(value));
    }
  }

  template <typename Range>
  void set_list(const std::string& key, const Range& values) {
    std::string text;
    for (const auto& v : values) {
      if (!text.empty()) text += ",";
      if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
        text += format_double(static_cast<double>(v));
      } else {
        text += std::to_string(v);
      }
    }
    set(key, std::move(text));
  }

  bool contains(std::string_view key) const { return find(key) != nullptr; }

  std::optional<std::string> get(std::string_view key) const {
    if (const auto* v = find(key)) return *v;
    return std::nullopt;
  }

  const std::string& require(std::string_view key) const {
    if (const auto* v = find(key)) return *v;
    throw FormatError("missing key '" + std::string(key) + "'");
  }

  template <typename T>
  T number(std::string_view key) const {
    return parse_number<T>(require(key), key);
  }

  template <typename T>
  T number_or(std::string_view key, T fallback) const {
    const auto* v = find(key);
    return v ? parse_number<T>(*v, key) : fallback;
  }

  std::string string_or(std::string_view key, std::string fallback) const {
    const auto* v = find(key);
    return v ? *v : std::move(fallback);
  }

  template <typename T>
  std::vector<T> list(std::string_view key) const {
    std::vector<T> out;
    const std::string& text = require(key);
    if (trim(text).empty()) return out;
    for (const auto& part : split(text, ',')) out.push_back(parse_number<T>(part, key));
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  /// Checks the format tag and that the version is one this build reads.
  void expect_format(std::string_view format, int max_version) const {
    const std::string got = string_or("format", "");
    if (got != format) {
      throw FormatError("expected '" + std::string(format) + "' document, found '" + got + "'");
    }
    const int version = number<int>("version");
    if (version < 1 || version > max_version) {
      throw FormatError("unsupported " + std::string(format) + " version " +
                        std::to_string(version));
    }
  }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  static KvDocument parse(std::string_view text) {
    KvDocument doc;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string stripped = trim(line);
      if (stripped.empty() || stripped.front() == '#') continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos) {
        throw FormatError("line " + std::to_string(line_no) + ": expected 'key = value'");
      }
      std::string value = stripped.substr(eq + 1);
      if (const auto hash = value.find(" #"); hash != std::string::npos) value.resize(hash);
      const std::string key = trim(stripped.substr(0, eq));
      if (key.empty()) {
        throw FormatError("line " + std::to_string(line_no) + ": empty key");
      }
      if (doc.contains(key)) {
        throw FormatError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
      }
      doc.entries_.emplace_back(key, trim(value));
    }
    return doc;
  }

  static KvDocument read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    try {
      return parse(buffer.str());
    } catch (const Error& e) {
      rethrow_with_context(e, path.string());
    }
  }

  void write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_string();
    if (!out) throw IoError("failed writing " + path.string());
  }

 private:
  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace saak
