#include "vulnlens/counterfactual.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <thread>

#include "vulnlens/error.hpp"
#include "vulnlens/util/csv.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/random.hpp"
#include "vulnlens/util/text.hpp"

namespace vulnlens::counterfactual {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Sex s) {
    switch (s) {
        case Sex::unknown: return "unknown";
        case Sex::female: return "female";
        case Sex::male: return "male";
    }
    return "?";
}

std::string_view to_string(Race r) {
    switch (r) {
        case Race::unknown: return "unknown";
        case Race::black: return "black";
        case Race::white: return "white";
        case Race::hispanic: return "hispanic";
        case Race::asian: return "asian";
    }
    return "?";
}

std::optional<Sex> parse_sex(std::string_view s) {
    const auto l = util::lower(util::trim(s));
    for (auto v : kAllSexes)
        if (l == to_string(v)) return v;
    return std::nullopt;
}

std::optional<Race> parse_race(std::string_view s) {
    const auto l = util::lower(util::trim(s));
    for (auto v : kAllRaces)
        if (l == to_string(v)) return v;
    return std::nullopt;
}

// ---------------------------------------------------------------------------

std::vector<Candidate> select_counterfactual_bases(const labeling::ReferenceLabels& reference, int target_n,
                                                   std::uint64_t seed, const std::set<std::string>& rejected) {
    if (target_n < 1) throw ConfigError("counterfactual target must be >= 1");
    constexpr auto& vulns = codebook::kAllVulnerabilities;
    const int nv = static_cast<int>(vulns.size());

    // Per vulnerability: shuffled positives, then shuffled inconclusives.
    std::map<VulnerabilityId, std::vector<std::pair<std::string, LabelOutcome>>> queues;
    for (auto v : vulns) {
        std::vector<std::string> pos, inc;
        for (const auto& [id, labels] : reference) {
            auto it = labels.find(v);
            if (it == labels.end()) continue;
            if (it->second == LabelOutcome::Positive) pos.push_back(id);
            if (it->second == LabelOutcome::Inconclusive) inc.push_back(id);
        }
        const std::string tag = "counterfactual|" + std::string(codebook::to_string(v));
        util::Rng rp(util::derive_seed(seed, tag + "|positive"));
        rp.shuffle(pos);
        util::Rng ri(util::derive_seed(seed, tag + "|inconclusive"));
        ri.shuffle(inc);
        auto& q = queues[v];
        for (auto& id : pos) q.emplace_back(std::move(id), LabelOutcome::Positive);
        for (auto& id : inc) q.emplace_back(std::move(id), LabelOutcome::Inconclusive);
    }

    std::set<std::string> used;
    std::map<VulnerabilityId, std::size_t> cursor;
    auto draw = [&](VulnerabilityId v) -> std::pair<std::string, LabelOutcome> {
        auto& q = queues[v];
        auto& c = cursor[v];
        while (c < q.size()) {
            const auto& cand = q[c++];
            if (used.count(cand.first)) continue;
            used.insert(cand.first);
            return cand;
        }
        throw SamplingError("counterfactual pool exhausted for " + std::string(codebook::to_string(v)));
    };

    // Quotas: equal shares, the remainder going to the first vulnerabilities.
    std::vector<Candidate> initial;
    for (int i = 0; i < nv; ++i) {
        const int quota = target_n / nv + (i < target_n % nv ? 1 : 0);
        for (int j = 0; j < quota; ++j) {
            auto [id, ref] = draw(vulns[i]);
            initial.push_back({id, vulns[i], ref, std::nullopt});
        }
    }

    std::vector<Candidate> out;
    std::vector<Candidate> replacements;
    for (const auto& c : initial) {
        if (!rejected.count(c.narrative_id)) {
            out.push_back(c);
            continue;
        }
        std::string replaced = c.narrative_id;
        for (;;) {
            auto [id, ref] = draw(c.vulnerability);
            if (rejected.count(id)) continue;
            replacements.push_back({id, c.vulnerability, ref, replaced});
            break;
        }
    }
    out.insert(out.end(), replacements.begin(), replacements.end());
    return out;
}

std::string worksheet_csv(const std::vector<WorksheetRow>& rows) {
    std::string out = util::csv_row({"narrative_id", "sex", "race", "evidence_span"});
    for (const auto& r : rows) out += util::csv_row({r.narrative_id, r.sex, r.race, r.evidence_span});
    return out;
}

std::vector<WorksheetRow> parse_worksheet(std::string_view csv_text) {
    const auto rows = util::parse_csv(csv_text);
    if (rows.empty()) throw ValidationError("annotation worksheet is empty");
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows[0].size(); ++i) col[util::lower(util::trim(rows[0][i]))] = i;
    for (const char* name : {"narrative_id", "sex", "race", "evidence_span"}) {
        if (!col.count(name)) throw ValidationError(std::string("annotation worksheet lacks column ") + name);
    }
    std::vector<WorksheetRow> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        auto get = [&](const char* name) {
            const auto i = col[name];
            return i < row.size() ? row[i] : std::string();
        };
        WorksheetRow w{get("narrative_id"), get("sex"), get("race"), get("evidence_span")};
        if (util::trim(w.narrative_id).empty()) continue;
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<WorksheetRow> worksheet_for(const std::vector<Candidate>& candidates) {
    std::vector<WorksheetRow> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates) out.push_back({c.narrative_id, "", "", ""});
    return out;
}

WorksheetContents read_annotations(const std::vector<WorksheetRow>& rows) {
    WorksheetContents out;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const std::string where = "worksheet row " + std::to_string(i + 1) + " (" + r.narrative_id + ")";
        if (!seen.insert(r.narrative_id).second) throw ValidationError(where + ": duplicate narrative id");
        const auto sex = util::lower(util::trim(r.sex));
        const auto race = util::lower(util::trim(r.race));
        if (sex == kExcludeMarker || race == kExcludeMarker) {
            out.rejected.insert(r.narrative_id);
            continue;
        }
        if (sex.empty() || race.empty()) {
            out.pending.push_back(r.narrative_id);
            continue;
        }
        auto s = parse_sex(sex);
        auto rc = parse_race(race);
        if (!s) throw ValidationError(where + ": sex must be unknown, female, male or exclude, got '" + r.sex + "'");
        if (!rc) {
            throw ValidationError(where + ": race must be unknown, black, white, hispanic, asian or exclude, got '" +
                                  r.race + "'");
        }
        SubjectAnnotation a{r.narrative_id, *s, *rc, std::nullopt};
        if (!util::trim(r.evidence_span).empty()) a.evidence_span = r.evidence_span;
        out.annotations.push_back(std::move(a));
    }
    return out;
}

// ---------------------------------------------------------------------------

ordered_json to_json(const VariantNarrative& v) {
    ordered_json j;
    j["base_id"] = v.base_id;
    j["sex"] = to_string(v.sex);
    j["race"] = to_string(v.race);
    j["text"] = v.text;
    j["validated"] = v.validated;
    j["validation_notes"] = v.validation_notes;
    return j;
}

VariantNarrative variant_from_json(const json& j) {
    try {
        VariantNarrative v;
        v.base_id = j.at("base_id").get<std::string>();
        auto s = parse_sex(j.at("sex").get<std::string>());
        auto r = parse_race(j.at("race").get<std::string>());
        if (!s || !r) throw ValidationError("variant " + v.base_id + ": bad sex or race");
        v.sex = *s;
        v.race = *r;
        v.text = j.at("text").get<std::string>();
        if (v.text.empty()) throw ValidationError("variant " + v.base_id + ": empty text");
        v.validated = j.value("validated", false);
        v.validation_notes = j.value("validation_notes", "");
        return v;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed variant record: ") + e.what());
    }
}

void save_variants(const fs::path& path, const std::vector<VariantNarrative>& variants) {
    std::set<std::string> keys;
    std::vector<ordered_json> rows;
    for (const auto& v : variants) {
        if (!keys.insert(variant_id(v.base_id, v.sex, v.race)).second) {
            throw IntegrityError("duplicate variant " + variant_id(v.base_id, v.sex, v.race));
        }
        rows.push_back(to_json(v));
    }
    util::write_jsonl_atomic(path, rows);
}

std::vector<VariantNarrative> load_variants(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("variants file not found: " + path.string());
    std::vector<VariantNarrative> out;
    for (const auto& row : util::read_jsonl(path)) out.push_back(variant_from_json(row));
    return out;
}

std::string variant_id(const std::string& base_id, Sex sex, Race race) {
    return base_id + "__" + std::string(to_string(sex)) + "__" + std::string(to_string(race));
}

std::optional<VariantKey> parse_variant_id(std::string_view id) {
    const auto p2 = id.rfind("__");
    if (p2 == std::string_view::npos || p2 == 0) return std::nullopt;
    const auto p1 = id.rfind("__", p2 - 1);
    if (p1 == std::string_view::npos || p1 == 0) return std::nullopt;
    auto s = parse_sex(id.substr(p1 + 2, p2 - p1 - 2));
    auto r = parse_race(id.substr(p2 + 2));
    if (!s || !r) return std::nullopt;
    return VariantKey{std::string(id.substr(0, p1)), *s, *r};
}

namespace {

constexpr std::string_view kRewriteInstruction =
    "You edit police incident narratives for a counterfactual study. Rewrite the narrative given by the user so "
    "that its main subject is described with the target demographics below.\n"
    "\n"
    "Current subject: sex={{from_sex}}; race={{from_race}}\n"
    "Target subject: sex={{to_sex}}; race={{to_race}}\n"
    "\n"
    "Rules:\n"
    "- Change only the subject's sex or gender descriptors, race or ethnicity descriptors, and the pronouns that "
    "refer to the subject.\n"
    "- Where a target value is \"unknown\", remove that kind of descriptor and use neutral wording. Never write the "
    "word \"unknown\".\n"
    "- Keep every other word, the order of events, the punctuation and the redaction markers (xxx) unchanged. Names "
    "stay redacted.\n"
    "- Do not add, remove or reinterpret any other information.\n"
    "- Reply with the rewritten narrative only.";

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

}  // namespace

std::vector<gateway::ChatMessage> rewrite_messages(const std::string& text, const SubjectAnnotation& from, Sex sex,
                                                   Race race) {
    std::string sys(kRewriteInstruction);
    sys = replace_all(sys, "{{from_sex}}", to_string(from.sex));
    sys = replace_all(sys, "{{from_race}}", to_string(from.race));
    sys = replace_all(sys, "{{to_sex}}", to_string(sex));
    sys = replace_all(sys, "{{to_race}}", to_string(race));
    return {{gateway::Role::system, sys}, {gateway::Role::user, text}};
}

GenerationResult generate_variants(const corpus::Narrative& base, const SubjectAnnotation& annotation,
                                   gateway::Gateway& gateway, const gateway::ProviderConfig& rewriter,
                                   std::uint64_t seed) {
    if (annotation.narrative_id != base.id) {
        throw PreconditionError("annotation " + annotation.narrative_id + " does not belong to " + base.id);
    }
    struct Cell {
        Sex sex;
        Race race;
        std::optional<std::string> text;
        std::string error;
    };
    std::vector<Cell> cells;
    for (auto s : kAllSexes)
        for (auto r : kAllRaces) cells.push_back({s, r, std::nullopt, {}});

    std::atomic<std::size_t> next{0};
    std::exception_ptr fatal;
    std::mutex mu;
    const auto work = [&] {
        for (;;) {
            const std::size_t i = next++;
            if (i >= cells.size()) return;
            auto& c = cells[i];
            if (c.sex == annotation.sex && c.race == annotation.race) {
                c.text = base.clean_text;
                continue;
            }
            try {
                const auto msgs = rewrite_messages(base.clean_text, annotation, c.sex, c.race);
                const auto cell_seed = util::derive_seed(seed, variant_id(base.id, c.sex, c.race));
                auto reply = util::trim(gateway.send_chat(rewriter, msgs, cell_seed).text);
                if (reply.empty()) {
                    c.error = "rewriter returned an empty reply";
                } else {
                    c.text = std::string(reply);
                }
            } catch (const ProviderError& e) {
                c.error = e.what();
            } catch (...) {
                std::lock_guard lk(mu);
                if (!fatal) fatal = std::current_exception();
            }
        }
    };
    const int workers = std::clamp(rewriter.max_concurrent, 1, static_cast<int>(cells.size()));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (fatal) std::rethrow_exception(fatal);

    GenerationResult out;
    for (auto& c : cells) {
        if (c.text) {
            out.variants.push_back({base.id, c.sex, c.race, std::move(*c.text), false, ""});
        } else {
            out.failed.push_back({c.sex, c.race, c.error});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stub rewriter

namespace {

std::string match_case(const std::string& original, std::string replacement) {
    if (replacement.empty() || original.empty()) return replacement;
    const bool all_upper = original.size() > 1 && std::all_of(original.begin(), original.end(), [](char c) {
                               return !(c >= 'a' && c <= 'z');
                           });
    if (all_upper) {
        for (auto& c : replacement)
            if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    } else if (original[0] >= 'A' && original[0] <= 'Z' && replacement[0] >= 'a' && replacement[0] <= 'z') {
        replacement[0] = static_cast<char>(replacement[0] - 'a' + 'A');
    }
    return replacement;
}

const std::map<std::string, std::string>& sex_swap(Sex target) {
    static const std::map<std::string, std::string> to_female = {
        {"he", "she"},           {"him", "her"},          {"his", "her"},        {"himself", "herself"},
        {"man", "woman"},        {"men", "women"},        {"male", "female"},    {"males", "females"},
        {"boy", "girl"},         {"gentleman", "lady"},   {"father", "mother"},  {"husband", "wife"},
        {"son", "daughter"},     {"brother", "sister"},   {"boyfriend", "girlfriend"},
        {"they", "she"},         {"them", "her"},         {"their", "her"},      {"themself", "herself"},
        {"person", "woman"},
    };
    static const std::map<std::string, std::string> to_male = {
        {"she", "he"},           {"hers", "his"},         {"herself", "himself"}, {"woman", "man"},
        {"women", "men"},        {"female", "male"},      {"females", "males"},   {"girl", "boy"},
        {"lady", "gentleman"},   {"mother", "father"},    {"wife", "husband"},    {"daughter", "son"},
        {"sister", "brother"},   {"girlfriend", "boyfriend"},
        {"they", "he"},          {"them", "him"},         {"their", "his"},       {"themself", "himself"},
        {"person", "man"},
    };
    static const std::map<std::string, std::string> to_neutral = {
        {"he", "they"},          {"she", "they"},         {"him", "them"},        {"his", "their"},
        {"hers", "theirs"},      {"himself", "themself"}, {"herself", "themself"}, {"man", "person"},
        {"woman", "person"},     {"men", "people"},       {"women", "people"},    {"male", "person"},
        {"female", "person"},    {"boy", "child"},        {"girl", "child"},      {"gentleman", "person"},
        {"lady", "person"},      {"father", "parent"},    {"mother", "parent"},   {"husband", "spouse"},
        {"wife", "spouse"},      {"son", "child"},        {"daughter", "child"},  {"brother", "sibling"},
        {"sister", "sibling"},   {"boyfriend", "partner"}, {"girlfriend", "partner"},
    };
    switch (target) {
        case Sex::female: return to_female;
        case Sex::male: return to_male;
        case Sex::unknown: break;
    }
    return to_neutral;
}

bool is_function_word(const std::string& w) {
    static const std::set<std::string> words = {
        "", "and", "or", "to", "the", "a", "an", "at", "in", "on", "with", "from", "for", "that", "as", "but",
        "by", "of", "is", "was", "if", "when", "then", "so", "into", "out", "up", "down", "back", "off", "over",
        "about", "again", "after", "before", "until", "while", "because", "home"};
    return words.count(w) > 0;
}

std::string race_word(Race r) {
    switch (r) {
        case Race::black: return "black";
        case Race::white: return "white";
        case Race::hispanic: return "hispanic";
        case Race::asian: return "asian";
        case Race::unknown: break;
    }
    return "";
}

struct Token {
    std::string text;
    bool word;
};

std::vector<Token> tokenize_keep(std::string_view s) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const bool w = util::is_alnum(s[i]);
        std::size_t j = i;
        while (j < s.size() && util::is_alnum(s[j]) == w) ++j;
        out.push_back({std::string(s.substr(i, j - i)), w});
        i = j;
    }
    return out;
}

}  // namespace

std::string swap_descriptors(const std::string& text, Sex sex, Race race) {
    const auto& sexmap = sex_swap(sex);
    const auto lex = default_lexicon();
    std::set<std::string> race_any;
    for (const auto& [r, terms] : lex.race_terms)
        if (r != Race::unknown) race_any.insert(terms.begin(), terms.end());

    auto toks = tokenize_keep(text);
    bool sex_present = false, race_present = false;
    const auto& target_sex_terms = lex.sex_terms.at(sex);
    const std::string target_race = race_word(race);

    for (std::size_t i = 0; i < toks.size(); ++i) {
        auto& t = toks[i];
        if (!t.word) continue;
        const auto l = util::lower(t.text);
        if (race_any.count(l)) {
            if (race == Race::unknown) {
                t.text.clear();
                // drop one adjacent space so "a white man" becomes "a man"
                if (i + 1 < toks.size() && !toks[i + 1].word && toks[i + 1].text == " ") toks[i + 1].text.clear();
            } else {
                t.text = match_case(t.text, target_race);
                race_present = true;
            }
            continue;
        }
        std::string repl;
        if (l == "her" && sex != Sex::female) {
            // object or possessive, judged by the next word
            std::string next;
            if (i + 2 < toks.size() && toks[i + 1].text == " " && toks[i + 2].word) next = util::lower(toks[i + 2].text);
            const bool possessive = !is_function_word(next);
            if (sex == Sex::male) repl = possessive ? "his" : "him";
            else repl = possessive ? "their" : "them";
        } else if (auto it = sexmap.find(l); it != sexmap.end()) {
            repl = it->second;
        }
        if (!repl.empty()) t.text = match_case(t.text, repl);
        if (target_sex_terms.count(util::lower(t.text))) sex_present = true;
    }

    std::string out;
    for (const auto& t : toks) out += t.text;
    out = util::trim(out);

    std::string prefix;
    const bool need_race = race != Race::unknown && !race_present;
    const bool need_sex = sex != Sex::unknown && !sex_present;
    if (need_race || need_sex) {
        prefix = "Subject:";
        if (need_race) prefix += " " + match_case("X", target_race);
        if (need_sex) prefix += " " + std::string(to_string(sex));
        prefix += ". ";
    }
    return prefix + out;
}

gateway::CompletionResult StubRewriter::complete(const gateway::ProviderConfig&,
                                                 const gateway::CompletionRequest& request) {
    if (request.messages.size() < 2) throw PreconditionError("rewrite request needs instruction and narrative");
    const auto& sys = request.messages.front().content;
    const auto pos = sys.find("Target subject: sex=");
    if (pos == std::string::npos) throw PreconditionError("rewrite instruction lacks a target");
    const auto line_end = sys.find('\n', pos);
    const std::string line = sys.substr(pos, line_end == std::string::npos ? std::string::npos : line_end - pos);
    const auto sp = line.find("sex=");
    const auto rp = line.find("race=");
    const auto semi = line.find(';', sp);
    auto s = parse_sex(line.substr(sp + 4, semi - sp - 4));
    auto r = parse_race(line.substr(rp + 5));
    if (!s || !r) throw PreconditionError("rewrite instruction has an unreadable target");

    gateway::CompletionResult out;
    out.text = swap_descriptors(request.messages.back().content, *s, *r);
    out.request_id = "stub-rewrite";
    return out;
}

// ---------------------------------------------------------------------------
// Validation

bool DemographicLexicon::contains(const std::string& token) const {
    for (const auto& [_, terms] : sex_terms)
        if (terms.count(token)) return true;
    for (const auto& [_, terms] : race_terms)
        if (terms.count(token)) return true;
    return false;
}

DemographicLexicon default_lexicon() {
    DemographicLexicon lex;
    lex.sex_terms[Sex::female] = {"she",  "her",    "hers",   "herself",  "woman",  "women",      "female",
                                  "females", "girl", "lady", "mother", "wife", "daughter", "sister", "girlfriend"};
    lex.sex_terms[Sex::male] = {"he",    "him",    "his",     "himself", "man",     "men",     "male",   "males",
                                "boy",   "gentleman", "father", "husband", "son", "brother", "boyfriend"};
    lex.sex_terms[Sex::unknown] = {"they",  "them",   "their",  "theirs", "themself", "themselves", "person",
                                   "people", "child", "parent", "spouse", "sibling",  "partner"};
    lex.race_terms[Race::black] = {"black", "african"};
    lex.race_terms[Race::white] = {"white", "caucasian"};
    lex.race_terms[Race::hispanic] = {"hispanic", "latino", "latina", "latinx"};
    lex.race_terms[Race::asian] = {"asian"};
    return lex;
}

std::vector<std::string> masked_tokens(std::string_view text, const DemographicLexicon& lexicon) {
    std::vector<std::string> out;
    for (auto& t : tokenize_keep(text)) {
        if (!t.word) continue;
        auto l = util::lower(t.text);
        if (lexicon.contains(l)) continue;
        out.push_back(std::move(l));
    }
    return out;
}

double token_similarity(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return 2.0 * static_cast<double>(prev[b.size()]) / static_cast<double>(a.size() + b.size());
}

namespace {

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

}  // namespace

ValidationReport validate_variant(const corpus::Narrative& base, const VariantNarrative& variant,
                                  const ValidationConfig& config) {
    ValidationReport rep;
    if (variant.text == base.clean_text) {
        rep.notes = "identical to base";
        return rep;
    }
    const double base_len = static_cast<double>(util::utf8_length(base.clean_text));
    rep.length_ratio = base_len > 0 ? static_cast<double>(util::utf8_length(variant.text)) / base_len : 0.0;
    rep.similarity = token_similarity(masked_tokens(base.clean_text, config.lexicon),
                                      masked_tokens(variant.text, config.lexicon));

    std::set<std::string> tokens;
    for (auto& t : tokenize_keep(variant.text))
        if (t.word) tokens.insert(util::lower(t.text));
    auto has_any = [&](const std::set<std::string>& terms) {
        return std::any_of(terms.begin(), terms.end(), [&](const std::string& t) { return tokens.count(t) > 0; });
    };
    std::vector<std::string> problems;
    if (variant.sex != Sex::unknown) {
        auto it = config.lexicon.sex_terms.find(variant.sex);
        if (it == config.lexicon.sex_terms.end() || !has_any(it->second)) {
            rep.target_terms_present = false;
            problems.push_back("no " + std::string(to_string(variant.sex)) + " term");
        }
    }
    if (variant.race != Race::unknown) {
        auto it = config.lexicon.race_terms.find(variant.race);
        if (it == config.lexicon.race_terms.end() || !has_any(it->second)) {
            rep.target_terms_present = false;
            problems.push_back("no " + std::string(to_string(variant.race)) + " term");
        }
    }
    if (rep.length_ratio < config.min_length_ratio || rep.length_ratio > config.max_length_ratio) {
        problems.push_back("length ratio out of range");
    }
    if (rep.similarity < config.min_similarity) problems.push_back("similarity below threshold");
    rep.passed = problems.empty();

    rep.notes = "length_ratio=" + fmt2(rep.length_ratio) + "; similarity=" + fmt2(rep.similarity);
    for (const auto& p : problems) rep.notes += "; " + p;
    return rep;
}

void apply_validation(const corpus::Narrative& base, VariantNarrative& variant, const ValidationConfig& config) {
    if (variant.base_id != base.id) throw PreconditionError("variant does not belong to " + base.id);
    const auto rep = validate_variant(base, variant, config);
    variant.validated = rep.passed;
    variant.validation_notes = rep.notes;
}

// ---------------------------------------------------------------------------

VariantLabelingReport label_variants(const std::vector<VariantNarrative>& variants,
                                     const std::vector<VariantLabelingJob>& jobs, gateway::Gateway& gateway,
                                     const fs::path& runs_root, const std::set<std::string>& approved_ids,
                                     const labeling::RunOptions& options) {
    VariantLabelingReport rep;
    std::vector<labeling::LabelTarget> targets;
    std::set<std::string> ids;
    for (const auto& v : variants) {
        const auto id = variant_id(v.base_id, v.sex, v.race);
        if (!ids.insert(id).second) throw IntegrityError("duplicate variant " + id);
        if (!v.validated && !approved_ids.count(id)) {
            ++rep.excluded_unvalidated;
            continue;
        }
        targets.push_back({id, v.text});
    }
    rep.labelled_variants = targets.size();
    for (const auto& job : jobs) {
        rep.runs.push_back(labeling::run_labeling(targets, job.config, job.prompt, gateway, runs_root, options));
    }
    return rep;
}

}  // namespace vulnlens::counterfactual
