#include "vulnlens/outcome.hpp"

#include "vulnlens/util/text.hpp"

namespace vulnlens::labeling {

namespace {

bool is_separator(char c) {
    switch (c) {
        case ':': case '-': case '=': case '[': case ']': case '(': case ')': case '{': case '}':
        case '*': case '"': case '\'': case '`': case '_': case '>':
            return true;
        default:
            return util::is_space(c);
    }
}

bool is_letter(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

// Token at `pos` (case-insensitive, not followed by a letter), if any.
std::optional<LabelOutcome> token_at(std::string_view s, std::size_t pos, std::size_t* end) {
    for (auto o : kAllOutcomes) {
        const auto tok = prompt_token(o);
        if (pos + tok.size() > s.size()) continue;
        if (util::ifind(s.substr(pos, tok.size()), tok) != 0) continue;
        const std::size_t after = pos + tok.size();
        if (after < s.size() && is_letter(s[after])) continue;
        *end = after;
        return o;
    }
    return std::nullopt;
}

std::optional<LabelOutcome> match_after_keyword(std::string_view s, std::size_t pos) {
    while (pos < s.size() && is_separator(s[pos])) ++pos;
    std::size_t end = 0;
    const auto first = token_at(s, pos, &end);
    if (!first) return std::nullopt;
    // Reject the echoed format line: another token must not follow in the
    // same bracket list.
    std::size_t p = end;
    while (p < s.size() && (is_separator(s[p]) || s[p] == ',' || s[p] == '/' || s[p] == '|')) ++p;
    std::size_t ignored = 0;
    if (p > end && token_at(s, p, &ignored)) {
        const std::string_view gap = s.substr(end, p - end);
        if (gap.find(',') != std::string_view::npos || gap.find('/') != std::string_view::npos ||
            gap.find('|') != std::string_view::npos) {
            return std::nullopt;
        }
    }
    return first;
}

}  // namespace

std::string_view to_string(LabelOutcome o) {
    switch (o) {
        case LabelOutcome::Negative: return "negative";
        case LabelOutcome::Inconclusive: return "inconclusive";
        case LabelOutcome::Positive: return "positive";
    }
    return "negative";
}

std::string_view prompt_token(LabelOutcome o) {
    switch (o) {
        case LabelOutcome::Negative: return "NEGATIVE";
        case LabelOutcome::Inconclusive: return "INCONCLUSIVE";
        case LabelOutcome::Positive: return "POSITIVE";
    }
    return "NEGATIVE";
}

std::optional<LabelOutcome> parse_outcome(std::string_view s) {
    for (auto o : kAllOutcomes) {
        if (util::lower(s) == to_string(o)) return o;
    }
    return std::nullopt;
}

std::optional<LabelOutcome> parse_classification(std::string_view reply) {
    static constexpr std::string_view kKeyword = "classification";
    std::optional<LabelOutcome> last;
    std::size_t pos = 0;
    while ((pos = util::ifind(reply, kKeyword, pos)) != std::string_view::npos) {
        if (auto o = match_after_keyword(reply, pos + kKeyword.size())) last = o;
        pos += kKeyword.size();
    }
    return last;
}

}  // namespace vulnlens::labeling
