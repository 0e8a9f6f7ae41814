#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vulnlens::codebook {

enum class VulnerabilityId { mental_ill_health, substance_misuse, alcohol_dependence, homelessness };

inline constexpr std::array<VulnerabilityId, 4> kAllVulnerabilities = {
    VulnerabilityId::mental_ill_health, VulnerabilityId::substance_misuse,
    VulnerabilityId::alcohol_dependence, VulnerabilityId::homelessness};

std::string_view to_string(VulnerabilityId v);
std::optional<VulnerabilityId> parse_vulnerability(std::string_view s);

/// Wording substituted for {{ vulnerability }} in custom prompts.
std::string_view display_name(VulnerabilityId v);

enum class PromptStrategy { codebook, custom };

std::string_view to_string(PromptStrategy s);
std::optional<PromptStrategy> parse_strategy(std::string_view s);

/// One labelled category of a codebook definition: a lead sentence and the
/// bullet examples under it.
struct CriteriaSection {
    std::string summary;
    std::vector<std::string> criteria;
};

struct CodebookEntry {
    VulnerabilityId vulnerability{};
    std::string title;
    std::string general_definition;
    CriteriaSection positive;
    CriteriaSection inconclusive;
    CriteriaSection negative;
};

/// Evidence blocks for the custom prompt, one "- item" line per example.
struct CustomEvidence {
    VulnerabilityId vulnerability{};
    std::string positive_evidence;
    std::string inconclusive_evidence;
    std::string negative_evidence;
};

struct CodebookItem {
    CodebookEntry entry;
    CustomEvidence evidence;
};

using Codebook = std::map<VulnerabilityId, CodebookItem>;

inline constexpr std::string_view kClassificationFormat = "Classification: [POSITIVE, INCONCLUSIVE, NEGATIVE]";
inline constexpr std::array<std::string_view, 3> kLabelTokens = {"POSITIVE", "INCONCLUSIVE", "NEGATIVE"};

struct RenderedPrompt {
    std::string instruction_text;
    std::array<std::string_view, 3> expected_label_tokens = kLabelTokens;
};

/// Load and validate a codebook file. Every vulnerability must be present
/// with non-empty definition, criteria and evidence; errors name the
/// vulnerability and field.
Codebook load_codebook(const std::filesystem::path& path);
Codebook parse_codebook(std::string_view yaml_text, const std::string& source_name = "<memory>");

/// Canonical text form; parse_codebook(serialize_codebook(c)) == c.
std::string serialize_codebook(const Codebook& codebook);

/// Definition text as quoted into the codebook prompt.
std::string render_definition(const CodebookEntry& entry);

RenderedPrompt render_codebook_prompt(const CodebookEntry& entry);
RenderedPrompt render_custom_prompt(const CustomEvidence& evidence, std::string_view vulnerability_name);
RenderedPrompt render_prompt(const CodebookItem& item, PromptStrategy strategy);

/// Follow-up message sent when a reply cannot be parsed.
std::string reformat_message();

/// Replace every "{{ name }}" in `tmpl`. Throws ValidationError if a
/// placeholder has no value.
std::string substitute(std::string_view tmpl, const std::map<std::string, std::string>& values);

bool operator==(const CriteriaSection& a, const CriteriaSection& b);
bool operator==(const CodebookEntry& a, const CodebookEntry& b);
bool operator==(const CustomEvidence& a, const CustomEvidence& b);
bool operator==(const CodebookItem& a, const CodebookItem& b);

}  // namespace vulnlens::codebook
