#include "vulnlens/corpus.hpp"

#include <unordered_set>

#include <httplib.h>
#include <json.hpp>

#include "vulnlens/error.hpp"
#include "vulnlens/util/csv.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/hash.hpp"
#include "vulnlens/util/text.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace vulnlens::corpus {

namespace {

bool is_url(std::string_view s) {
    return s.rfind("http://", 0) == 0 || s.rfind("https://", 0) == 0;
}

bool is_punct_rule_char(char c) {
    return c == '.' || c == ',' || c == ';' || c == ':' || c == '?' || c == '!';
}

}  // namespace

std::string fetch_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(origin);
    client.set_follow_location(true);
    client.set_connection_timeout(30);
    client.set_read_timeout(300);
    auto res = client.Get(path);
    if (!res) {
        throw IoError("cannot fetch " + url + ": " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw IoError("cannot fetch " + url + ": HTTP " + std::to_string(res->status));
    }
    return res->body;
}

IngestResult ingest_csv_text(std::string_view csv_text, const std::string& text_column,
                             const std::string& source_name) {
    auto rows = util::parse_csv(csv_text);
    if (rows.empty()) throw ConfigError(source_name + ": CSV has no header row");

    auto header = rows.front();
    // Tolerate a UTF-8 BOM on the first header cell.
    if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
    std::size_t text_idx = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == text_column) text_idx = i;
    }
    if (text_idx == header.size()) {
        throw ConfigError(source_name + ": header has no column named '" + text_column + "'");
    }

    IngestResult result;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        // A trailing newline produces one empty pseudo-row.
        if (row.size() == 1 && row[0].empty() && r + 1 == rows.size()) break;
        const std::string text = text_idx < row.size() ? row[text_idx] : std::string();
        if (util::trim(text).empty()) {
            ++result.skipped_blank;
            continue;
        }
        RawRecord rec;
        rec.source_id = source_name + "#" + std::to_string(r);
        rec.text = text;
        for (std::size_t c = 0; c < row.size() && c < header.size(); ++c) {
            if (c != text_idx) rec.meta[header[c]] = row[c];
        }
        result.records.push_back(std::move(rec));
    }
    return result;
}

IngestResult ingest_raw(const std::string& source, const std::string& text_column) {
    std::string body;
    if (is_url(source)) {
        body = fetch_url(source);
    } else {
        if (!fs::exists(source)) throw IoError("cannot read " + source + ": no such file");
        body = util::read_file(source);
    }
    return ingest_csv_text(body, text_column, source);
}

std::string clean_text(std::string_view raw) {
    // Rules (a) and (b): spacing insertions.
    std::string spaced;
    spaced.reserve(raw.size() + raw.size() / 8);
    for (std::size_t i = 0; i < raw.size();) {
        if (i + 3 <= raw.size() && util::to_lower(raw[i]) == 'x' && util::to_lower(raw[i + 1]) == 'x' &&
            util::to_lower(raw[i + 2]) == 'x') {
            spaced.append(raw.substr(i, 3));
            i += 3;
            if (i < raw.size() && util::is_alnum(raw[i])) spaced.push_back(' ');
            continue;
        }
        const char c = raw[i];
        spaced.push_back(c);
        ++i;
        if (is_punct_rule_char(c) && i < raw.size() && util::is_alnum(raw[i])) spaced.push_back(' ');
    }

    // Rules (c) and (d): collapse and trim.
    std::string out;
    out.reserve(spaced.size());
    bool pending_space = false;
    for (char c : spaced) {
        if (util::is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(c);
    }
    return out;
}

Narrative make_narrative(std::string raw_text) {
    Narrative n;
    n.clean_text = clean_text(raw_text);
    n.raw_text = std::move(raw_text);
    n.id = util::sha256_hex(n.clean_text);
    n.char_count = util::utf8_length(n.clean_text);
    n.word_count = util::split_whitespace(n.clean_text).size();
    return n;
}

Corpus build_corpus(const std::vector<RawRecord>& records) {
    Corpus corpus;
    std::unordered_set<std::string> seen;
    for (const auto& rec : records) {
        ++corpus.stats.ingested;
        Narrative n = make_narrative(rec.text);
        if (n.char_count < kMinNarrativeChars) {
            ++corpus.stats.dropped_short;
            continue;
        }
        if (!seen.insert(n.clean_text).second) {
            ++corpus.stats.dropped_duplicate;
            continue;
        }
        corpus.narratives.push_back(std::move(n));
    }
    corpus.stats.kept = corpus.narratives.size();
    return corpus;
}

void save_corpus(const fs::path& path, const std::vector<Narrative>& narratives) {
    std::vector<ordered_json> rows;
    rows.reserve(narratives.size());
    for (const auto& n : narratives) {
        ordered_json j;
        j["id"] = n.id;
        j["raw_text"] = n.raw_text;
        j["clean_text"] = n.clean_text;
        j["char_count"] = n.char_count;
        j["word_count"] = n.word_count;
        rows.push_back(std::move(j));
    }
    util::write_jsonl_atomic(path, rows);
}

std::vector<Narrative> load_corpus(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("corpus file not found: " + path.string());
    std::vector<Narrative> out;
    for (const auto& j : util::read_jsonl(path)) {
        Narrative n;
        n.id = j.at("id").get<std::string>();
        n.raw_text = j.at("raw_text").get<std::string>();
        n.clean_text = j.at("clean_text").get<std::string>();
        n.char_count = j.at("char_count").get<std::size_t>();
        n.word_count = j.at("word_count").get<std::size_t>();
        out.push_back(std::move(n));
    }
    return out;
}

void save_raw(const fs::path& path, const std::vector<RawRecord>& records) {
    std::vector<ordered_json> rows;
    for (const auto& r : records) {
        ordered_json j;
        j["source_id"] = r.source_id;
        j["text"] = r.text;
        j["meta"] = r.meta;
        rows.push_back(std::move(j));
    }
    util::write_jsonl_atomic(path, rows);
}

std::vector<RawRecord> load_raw(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("raw record file not found: " + path.string());
    std::vector<RawRecord> out;
    for (const auto& j : util::read_jsonl(path)) {
        RawRecord r;
        r.source_id = j.at("source_id").get<std::string>();
        r.text = j.at("text").get<std::string>();
        r.meta = j.value("meta", std::map<std::string, std::string>{});
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace vulnlens::corpus
