#include "vulnlens/util/csv.hpp"

#include <sstream>

namespace vulnlens::util {

std::optional<std::vector<std::string>> CsvReader::next_row() {
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool any = false;
    int c;
    while ((c = in_.get()) != EOF) {
        any = true;
        const char ch = static_cast<char>(c);
        if (in_quotes) {
            if (ch == '"') {
                if (in_.peek() == '"') {
                    in_.get();
                    field.push_back('"');
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(ch);
            }
            continue;
        }
        if (ch == '"') {
            in_quotes = true;
        } else if (ch == ',') {
            row.push_back(std::move(field));
            field.clear();
        } else if (ch == '\r' && in_.peek() == '\n') {
            // CRLF: handled when '\n' arrives.
        } else if (ch == '\n') {
            row.push_back(std::move(field));
            return row;
        } else {
            field.push_back(ch);
        }
    }
    if (!any) return std::nullopt;
    row.push_back(std::move(field));
    return row;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    CsvReader reader(in);
    std::vector<std::vector<std::string>> rows;
    while (auto row = reader.next_row()) rows.push_back(std::move(*row));
    return rows;
}

std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out.push_back(',');
        out += csv_escape(fields[i]);
    }
    out.push_back('\n');
    return out;
}

}  // namespace vulnlens::util
