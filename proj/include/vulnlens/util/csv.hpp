#pragma once

#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vulnlens::util {

/// Minimal RFC-4180 reader: quoted fields, doubled quotes, embedded newlines,
/// CRLF or LF row endings.
class CsvReader {
public:
    explicit CsvReader(std::istream& in) : in_(in) {}

    /// Next row, or nullopt at end of input.
    std::optional<std::vector<std::string>> next_row();

private:
    std::istream& in_;
};

std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// Quote a field when it contains a delimiter, quote or newline.
std::string csv_escape(std::string_view field);
std::string csv_row(const std::vector<std::string>& fields);

}  // namespace vulnlens::util
