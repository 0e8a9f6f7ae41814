#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace vulnlens::util {

inline bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
inline bool is_alnum(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}
inline char to_lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

std::string lower(std::string_view s);
std::string trim(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);

/// Number of Unicode code points in a UTF-8 string (continuation bytes are
/// not counted; invalid sequences count byte by byte).
std::size_t utf8_length(std::string_view s);

/// Case-insensitive (ASCII) substring search. Returns npos when absent.
std::size_t ifind(std::string_view haystack, std::string_view needle, std::size_t from = 0);

}  // namespace vulnlens::util
