#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vulnlens::corpus {

/// Narratives whose cleaned text is shorter than this are dropped.
inline constexpr std::size_t kMinNarrativeChars = 200;

struct RawRecord {
    std::string source_id;
    std::string text;
    std::map<std::string, std::string> meta;
};

struct Narrative {
    std::string id;  ///< SHA-256 hex of clean_text
    std::string raw_text;
    std::string clean_text;
    std::size_t char_count = 0;  ///< code points in clean_text
    std::size_t word_count = 0;  ///< whitespace-separated tokens
};

struct IngestResult {
    std::vector<RawRecord> records;
    std::size_t skipped_blank = 0;
};

struct CorpusStats {
    std::size_t ingested = 0;
    std::size_t dropped_short = 0;
    std::size_t dropped_duplicate = 0;
    std::size_t kept = 0;
};

struct Corpus {
    std::vector<Narrative> narratives;
    CorpusStats stats;
};

/// Parse a CSV with a header row and return one record per row whose
/// `text_column` is not blank. `source` is a local path or an http(s) URL.
IngestResult ingest_raw(const std::string& source, const std::string& text_column);

/// Same as ingest_raw but over CSV text already in memory; `source_name`
/// only appears in error messages and record ids.
IngestResult ingest_csv_text(std::string_view csv_text, const std::string& text_column,
                             const std::string& source_name);

/// Normalise narrative spacing:
///  a) one space after . , ; : ? ! when directly followed by a letter or digit
///  b) one space after each case-insensitive "xxx" redaction token when
///     directly followed by a letter or digit
///  c) whitespace runs collapsed to a single space
///  d) leading and trailing whitespace removed
/// Letters and digits are ASCII; other bytes are passed through unchanged.
std::string clean_text(std::string_view raw);

Narrative make_narrative(std::string raw_text);

/// Clean, drop short texts, drop duplicates (first occurrence wins).
Corpus build_corpus(const std::vector<RawRecord>& records);

void save_corpus(const std::filesystem::path& path, const std::vector<Narrative>& narratives);
std::vector<Narrative> load_corpus(const std::filesystem::path& path);

void save_raw(const std::filesystem::path& path, const std::vector<RawRecord>& records);
std::vector<RawRecord> load_raw(const std::filesystem::path& path);

/// Fetch a URL body over HTTP(S). Exposed for the CLI's ingest command.
std::string fetch_url(const std::string& url);

}  // namespace vulnlens::corpus
