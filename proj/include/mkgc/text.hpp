#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace mkgc {

/// Keeps at most `max_code_points` UTF-8 code points; never splits a sequence.
inline std::string utf8_truncate(std::string_view s, std::size_t max_code_points) {
  std::size_t count = 0;
  std::size_t i = 0;
  while (i < s.size()) {
    if (count == max_code_points) break;
    ++i;
    while (i < s.size() && (static_cast<unsigned char>(s[i]) & 0xC0) == 0x80) ++i;
    ++count;
  }
  return std::string(s.substr(0, i));
}

inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

/// Splits on ASCII whitespace; empty tokens are dropped.
inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    const std::size_t start = i;
    while (i < s.size() && !is_space(s[i])) ++i;
    if (i > start) out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

}  // namespace mkgc
