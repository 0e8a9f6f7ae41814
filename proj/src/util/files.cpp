#include "vulnlens/util/files.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <system_error>

#include <unistd.h>

#include "vulnlens/error.hpp"

namespace fs = std::filesystem;

namespace vulnlens::util {

void write_atomic(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<nlohmann::ordered_json> read_jsonl(const fs::path& path) {
    std::vector<nlohmann::ordered_json> rows;
    if (!fs::exists(path)) return rows;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            rows.push_back(nlohmann::ordered_json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

void write_jsonl_atomic(const fs::path& path, const std::vector<nlohmann::ordered_json>& rows) {
    std::string content;
    for (const auto& row : rows) {
        content += row.dump();
        content.push_back('\n');
    }
    write_atomic(path, content);
}

JsonlAppender::JsonlAppender(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    file_ = std::fopen(path.c_str(), "ab");
    if (!file_) throw IoError("cannot open " + path.string() + " for append");
}

JsonlAppender::~JsonlAppender() {
    if (file_) std::fclose(file_);
}

void JsonlAppender::append(const nlohmann::ordered_json& row) {
    const std::string line = row.dump() + "\n";
    if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0) {
        throw IoError("append failed on " + path_.string());
    }
}

}  // namespace vulnlens::util
