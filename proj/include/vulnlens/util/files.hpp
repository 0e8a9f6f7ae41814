#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace vulnlens::util {

/// Write `content` to a temporary sibling then rename over `path`.
void write_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// Parse a JSON-lines file; blank lines are skipped. A missing file yields
/// an empty vector.
std::vector<nlohmann::ordered_json> read_jsonl(const std::filesystem::path& path);

void write_jsonl_atomic(const std::filesystem::path& path, const std::vector<nlohmann::ordered_json>& rows);

/// Append-only writer for JSON-lines stores. Each line is flushed so an
/// interrupted process leaves only whole records behind.
class JsonlAppender {
public:
    explicit JsonlAppender(const std::filesystem::path& path);
    ~JsonlAppender();
    JsonlAppender(const JsonlAppender&) = delete;
    JsonlAppender& operator=(const JsonlAppender&) = delete;

    void append(const nlohmann::ordered_json& row);

private:
    std::FILE* file_ = nullptr;
    std::filesystem::path path_;
};

}  // namespace vulnlens::util
