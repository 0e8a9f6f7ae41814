#include "vulnlens/codebook.hpp"

#include <sstream>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "vulnlens/error.hpp"
#include "vulnlens/util/files.hpp"

namespace vulnlens::codebook {

namespace {

constexpr std::string_view kCodebookTemplate =
    "Read the following definition:\n"
    "\n"
    "{{ vulnerability definition }}\n"
    "\n"
    "You will be provided police incident reports, and should use the definition to classify the report.\n"
    "\n"
    "Your response should begin with short notes highlighting quotes from the report, and aligning them with "
    "quotes from the definitions above. Keep your notes brief, 2 sentences max. Follow the highlighted evidence "
    "with a classification that aligns with the evidence and the definitions. Return your classification in "
    "the following format:\n"
    "\n"
    "`Classification: [POSITIVE, INCONCLUSIVE, NEGATIVE]`.\n"
    "\n"
    "Ensure that your response ends with your classification or it will be rejected.";

constexpr std::string_view kCustomTemplate =
    "You are required to classify police incident reports for involvement of persons experiencing "
    "{{ vulnerability }}. Use the following definitions for the labels you should assign:\n"
    "\n"
    "POSITIVE: Report confirms that someone is experiencing {{ vulnerability }}, or contains unmistakable "
    "evidence of {{ vulnerability }} having ruled out any other plausible explanations. For example:\n"
    "\n"
    "{{ positive_evidence }}\n"
    "\n"
    "INCONCLUSIVE: Report contains evidence that is best explained by an individual experiencing "
    "{{ vulnerability }}, but there is not definitive or conclusive confirmation of {{ vulnerability }}. "
    "For example:\n"
    "\n"
    "{{ inconclusive_evidence }}\n"
    "\n"
    "NEGATIVE: Evidence for {{ vulnerability }} that can be explained by other factors, or no evidence for "
    "{{ vulnerability }}. The following should not be considered evidence for {{ vulnerability }}:\n"
    "\n"
    "{{ negative_evidence }}\n"
    "\n"
    "Write short notes highlighting quotes from the report, and link each quote to the relevant quote above. "
    "Keep the notes to two sentences max.\n"
    "\n"
    "End your report with a classification that aligns with the evidence you have highlighted. Use the format "
    "\"Classification: [POSITIVE, INCONCLUSIVE, NEGATIVE]\". If the final word of your report is not the "
    "classification, it will be marked invalid.";

constexpr std::string_view kReformatMessage =
    "The response you've provided does not conform to the format requested. Please classify the log in the "
    "following format:\n"
    "\n"
    "Classification: [POSITIVE, INCONCLUSIVE, NEGATIVE]";

std::string bullet_block(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out.push_back('\n');
        out += "- " + items[i];
    }
    return out;
}

std::vector<std::string> split_bullets(const std::string& block) {
    std::vector<std::string> items;
    std::istringstream in(block);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("- ", 0) == 0) items.push_back(line.substr(2));
    }
    return items;
}

class Loader {
public:
    explicit Loader(std::string source) : source_(std::move(source)) {}

    std::string text(const YAML::Node& node, std::string_view vuln, std::string_view field) const {
        if (!node || !node.IsScalar() || node.as<std::string>().empty()) {
            fail(vuln, field, "missing or empty");
        }
        return node.as<std::string>();
    }

    std::vector<std::string> list(const YAML::Node& node, std::string_view vuln, std::string_view field) const {
        if (!node || !node.IsSequence() || node.size() == 0) fail(vuln, field, "missing or empty list");
        std::vector<std::string> out;
        for (const auto& item : node) {
            if (!item.IsScalar() || item.as<std::string>().empty()) fail(vuln, field, "contains an empty item");
            out.push_back(item.as<std::string>());
        }
        return out;
    }

    CriteriaSection section(const YAML::Node& node, std::string_view vuln, std::string_view name) const {
        if (!node || !node.IsMap()) fail(vuln, name, "missing section");
        CriteriaSection s;
        s.summary = text(node["summary"], vuln, std::string(name) + ".summary");
        s.criteria = list(node["criteria"], vuln, std::string(name) + ".criteria");
        return s;
    }

    [[noreturn]] void fail(std::string_view vuln, std::string_view field, std::string_view what) const {
        throw ValidationError(source_ + ": vulnerability " + std::string(vuln) + ": field " + std::string(field) +
                              " " + std::string(what));
    }

private:
    std::string source_;
};

}  // namespace

std::string_view to_string(VulnerabilityId v) {
    switch (v) {
        case VulnerabilityId::mental_ill_health: return "mental_ill_health";
        case VulnerabilityId::substance_misuse: return "substance_misuse";
        case VulnerabilityId::alcohol_dependence: return "alcohol_dependence";
        case VulnerabilityId::homelessness: return "homelessness";
    }
    return "unknown";
}

std::optional<VulnerabilityId> parse_vulnerability(std::string_view s) {
    for (auto v : kAllVulnerabilities) {
        if (to_string(v) == s) return v;
    }
    return std::nullopt;
}

std::string_view display_name(VulnerabilityId v) {
    switch (v) {
        case VulnerabilityId::mental_ill_health: return "mental health difficulties";
        case VulnerabilityId::substance_misuse: return "drug abuse";
        case VulnerabilityId::alcohol_dependence: return "alcohol dependence";
        case VulnerabilityId::homelessness: return "homelessness";
    }
    return "";
}

std::string_view to_string(PromptStrategy s) {
    return s == PromptStrategy::codebook ? "codebook" : "custom";
}

std::optional<PromptStrategy> parse_strategy(std::string_view s) {
    if (s == "codebook") return PromptStrategy::codebook;
    if (s == "custom") return PromptStrategy::custom;
    return std::nullopt;
}

Codebook parse_codebook(std::string_view yaml_text, const std::string& source_name) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(yaml_text));
    } catch (const YAML::Exception& e) {
        throw ValidationError(source_name + ": " + e.what());
    }
    const auto list = root["vulnerabilities"];
    if (!list || !list.IsSequence()) throw ValidationError(source_name + ": missing 'vulnerabilities' list");

    Loader load(source_name);
    Codebook book;
    for (const auto& node : list) {
        const std::string id_text = node["id"] ? node["id"].as<std::string>() : std::string();
        const auto id = parse_vulnerability(id_text);
        if (!id) throw ValidationError(source_name + ": unknown vulnerability id '" + id_text + "'");
        if (book.count(*id)) throw ValidationError(source_name + ": vulnerability " + id_text + " listed twice");

        CodebookItem item;
        item.entry.vulnerability = *id;
        item.entry.title = load.text(node["title"], id_text, "title");
        item.entry.general_definition = load.text(node["general_definition"], id_text, "general_definition");
        item.entry.positive = load.section(node["positive"], id_text, "positive");
        item.entry.inconclusive = load.section(node["inconclusive"], id_text, "inconclusive");
        item.entry.negative = load.section(node["negative"], id_text, "negative");

        const auto ev = node["custom_evidence"];
        if (!ev || !ev.IsMap()) load.fail(id_text, "custom_evidence", "missing section");
        item.evidence.vulnerability = *id;
        item.evidence.positive_evidence = bullet_block(load.list(ev["positive"], id_text, "positive_evidence"));
        item.evidence.inconclusive_evidence =
            bullet_block(load.list(ev["inconclusive"], id_text, "inconclusive_evidence"));
        item.evidence.negative_evidence = bullet_block(load.list(ev["negative"], id_text, "negative_evidence"));
        book.emplace(*id, std::move(item));
    }
    for (auto v : kAllVulnerabilities) {
        if (!book.count(v)) {
            throw ValidationError(source_name + ": vulnerability " + std::string(to_string(v)) + " is missing");
        }
    }
    return book;
}

Codebook load_codebook(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("codebook not found: " + path.string());
    return parse_codebook(util::read_file(path), path.string());
}

std::string serialize_codebook(const Codebook& codebook) {
    const auto q = [](const std::string& s) { return nlohmann::json(s).dump(); };
    std::string out = "vulnerabilities:\n";
    const auto section = [&](std::string_view name, const CriteriaSection& s) {
        out += "    " + std::string(name) + ":\n";
        out += "      summary: " + q(s.summary) + "\n";
        out += "      criteria:\n";
        for (const auto& c : s.criteria) out += "        - " + q(c) + "\n";
    };
    const auto evidence = [&](std::string_view name, const std::string& block) {
        out += "      " + std::string(name) + ":\n";
        for (const auto& c : split_bullets(block)) out += "        - " + q(c) + "\n";
    };
    for (auto v : kAllVulnerabilities) {
        const auto it = codebook.find(v);
        if (it == codebook.end()) continue;
        const auto& e = it->second.entry;
        out += "  - id: " + std::string(to_string(v)) + "\n";
        out += "    title: " + q(e.title) + "\n";
        out += "    general_definition: " + q(e.general_definition) + "\n";
        section("positive", e.positive);
        section("inconclusive", e.inconclusive);
        section("negative", e.negative);
        out += "    custom_evidence:\n";
        evidence("positive", it->second.evidence.positive_evidence);
        evidence("inconclusive", it->second.evidence.inconclusive_evidence);
        evidence("negative", it->second.evidence.negative_evidence);
    }
    return out;
}

std::string render_definition(const CodebookEntry& entry) {
    std::string out = entry.title + "\n\nGeneral Definition:\n" + entry.general_definition + "\n\nCategories:\n";
    const auto section = [&](int n, std::string_view label, const CriteriaSection& s) {
        out += std::to_string(n) + ". " + std::string(label) + ": " + s.summary + "\n";
        out += bullet_block(s.criteria);
    };
    section(1, "Positive", entry.positive);
    out += "\n";
    section(2, "Inconclusive", entry.inconclusive);
    out += "\n";
    section(3, "Negative", entry.negative);
    return out;
}

std::string substitute(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const auto open = tmpl.find("{{", pos);
        if (open == std::string_view::npos) break;
        const auto close = tmpl.find("}}", open);
        if (close == std::string_view::npos) throw ValidationError("unterminated placeholder in template");
        std::string name(tmpl.substr(open + 2, close - open - 2));
        const auto b = name.find_first_not_of(' ');
        const auto e = name.find_last_not_of(' ');
        name = b == std::string::npos ? std::string() : name.substr(b, e - b + 1);
        const auto it = values.find(name);
        if (it == values.end()) throw ValidationError("no value for template placeholder '" + name + "'");
        out.append(tmpl.substr(pos, open - pos));
        out += it->second;
        pos = close + 2;
    }
    out.append(tmpl.substr(pos));
    return out;
}

RenderedPrompt render_codebook_prompt(const CodebookEntry& entry) {
    RenderedPrompt p;
    p.instruction_text = substitute(kCodebookTemplate, {{"vulnerability definition", render_definition(entry)}});
    return p;
}

RenderedPrompt render_custom_prompt(const CustomEvidence& evidence, std::string_view vulnerability_name) {
    RenderedPrompt p;
    p.instruction_text = substitute(kCustomTemplate, {{"vulnerability", std::string(vulnerability_name)},
                                                      {"positive_evidence", evidence.positive_evidence},
                                                      {"inconclusive_evidence", evidence.inconclusive_evidence},
                                                      {"negative_evidence", evidence.negative_evidence}});
    return p;
}

RenderedPrompt render_prompt(const CodebookItem& item, PromptStrategy strategy) {
    if (strategy == PromptStrategy::codebook) return render_codebook_prompt(item.entry);
    return render_custom_prompt(item.evidence, display_name(item.evidence.vulnerability));
}

std::string reformat_message() { return std::string(kReformatMessage); }

bool operator==(const CriteriaSection& a, const CriteriaSection& b) {
    return a.summary == b.summary && a.criteria == b.criteria;
}
bool operator==(const CodebookEntry& a, const CodebookEntry& b) {
    return a.vulnerability == b.vulnerability && a.title == b.title && a.general_definition == b.general_definition &&
           a.positive == b.positive && a.inconclusive == b.inconclusive && a.negative == b.negative;
}
bool operator==(const CustomEvidence& a, const CustomEvidence& b) {
    return a.vulnerability == b.vulnerability && a.positive_evidence == b.positive_evidence &&
           a.inconclusive_evidence == b.inconclusive_evidence && a.negative_evidence == b.negative_evidence;
}
bool operator==(const CodebookItem& a, const CodebookItem& b) { return a.entry == b.entry && a.evidence == b.evidence; }

}  // namespace vulnlens::codebook
