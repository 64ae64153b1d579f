#pragma once

// Flat `key = value` configuration files. Keys are the long flag names
// without their leading dashes (bm25.k1, train.batch, llm.model); `#` starts
// a comment. A key may repeat only for options that accept several values.

#include <istream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"

namespace distilrank {

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<ConfigEntry> read_config(std::istream& in) {
  std::vector<ConfigEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    std::string_view s = line;
    if (lineno == 1 && s.starts_with("\xEF\xBB\xBF")) s.remove_prefix(3);
    // A '#' inside a quoted value is kept.
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) {
        s = s.substr(0, i);
        break;
      }
    }
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw UsageError(detail::at_line(lineno, "expected key = value"));
    auto key = detail::trim(s.substr(0, eq));
    auto value = detail::trim(s.substr(eq + 1));
    while (key.starts_with('-')) key.remove_prefix(1);
    if (key.empty()) throw UsageError(detail::at_line(lineno, "empty key"));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out.push_back({std::string(key), std::string(value), lineno});
  }
  return out;
}

inline std::vector<ConfigEntry> load_config(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return read_config(in);
  } catch (const UsageError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

}  // namespace distilrank
