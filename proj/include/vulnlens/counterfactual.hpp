#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vulnlens/codebook.hpp"
#include "vulnlens/corpus.hpp"
#include "vulnlens/gateway.hpp"
#include "vulnlens/labeling.hpp"

namespace vulnlens::counterfactual {

using codebook::VulnerabilityId;
using labeling::LabelOutcome;

enum class Sex { unknown, female, male };
enum class Race { unknown, black, white, hispanic, asian };

inline constexpr std::array<Sex, 3> kAllSexes = {Sex::unknown, Sex::female, Sex::male};
inline constexpr std::array<Race, 5> kAllRaces = {Race::unknown, Race::black, Race::white, Race::hispanic,
                                                  Race::asian};

std::string_view to_string(Sex s);
std::string_view to_string(Race r);
std::optional<Sex> parse_sex(std::string_view s);
std::optional<Race> parse_race(std::string_view s);

struct SubjectAnnotation {
    std::string narrative_id;
    Sex sex = Sex::unknown;
    Race race = Race::unknown;
    std::optional<std::string> evidence_span;
};

// ---------------------------------------------------------------------------
// Base selection and the annotation worksheet

struct Candidate {
    std::string narrative_id;
    VulnerabilityId vulnerability{};
    LabelOutcome reference{};  ///< Positive, or Inconclusive when positives ran out
    std::optional<std::string> replaces;  ///< rejected candidate this one stands in for
};

/// Seeded, vulnerability-balanced selection from narratives whose reference
/// consensus is Positive (then Inconclusive) for that vulnerability. A
/// narrative is used for at most one vulnerability. Candidates in
/// `rejected` (multi-subject) are dropped and each gets a replacement drawn
/// from the same vulnerability's queue, appended in rejection order. Throws
/// SamplingError when a queue runs dry.
std::vector<Candidate> select_counterfactual_bases(const labeling::ReferenceLabels& reference, int target_n,
                                                   std::uint64_t seed,
                                                   const std::set<std::string>& rejected = {});

/// Marker accepted in the sex or race column for a multi-subject narrative.
inline constexpr std::string_view kExcludeMarker = "exclude";

struct WorksheetRow {
    std::string narrative_id;
    std::string sex;   ///< blank until annotated
    std::string race;
    std::string evidence_span;
};

/// CSV with the header narrative_id,sex,race,evidence_span.
std::string worksheet_csv(const std::vector<WorksheetRow>& rows);
std::vector<WorksheetRow> parse_worksheet(std::string_view csv_text);
std::vector<WorksheetRow> worksheet_for(const std::vector<Candidate>& candidates);

struct WorksheetContents {
    std::vector<SubjectAnnotation> annotations;
    std::set<std::string> rejected;
    std::vector<std::string> pending;  ///< rows with a blank sex or race
};

/// Validates every filled row; throws ValidationError naming the row.
WorksheetContents read_annotations(const std::vector<WorksheetRow>& rows);

// ---------------------------------------------------------------------------
// Variant generation

struct VariantNarrative {
    std::string base_id;
    Sex sex = Sex::unknown;
    Race race = Race::unknown;
    std::string text;
    bool validated = false;
    std::string validation_notes;
};

nlohmann::ordered_json to_json(const VariantNarrative& v);
VariantNarrative variant_from_json(const nlohmann::json& j);

void save_variants(const std::filesystem::path& path, const std::vector<VariantNarrative>& variants);
std::vector<VariantNarrative> load_variants(const std::filesystem::path& path);

/// Id under which a variant is labelled: "<base_id>__<sex>__<race>".
std::string variant_id(const std::string& base_id, Sex sex, Race race);

struct VariantKey {
    std::string base_id;
    Sex sex{};
    Race race{};
};

std::optional<VariantKey> parse_variant_id(std::string_view id);

/// Messages asking a model to move the subject from `from` to `to`.
std::vector<gateway::ChatMessage> rewrite_messages(const std::string& text, const SubjectAnnotation& from, Sex sex,
                                                   Race race);

struct FailedCell {
    Sex sex{};
    Race race{};
    std::string error;
};

struct GenerationResult {
    std::vector<VariantNarrative> variants;  ///< grid order: sex-major, then race
    std::vector<FailedCell> failed;
};

/// All 15 cells for one annotated base. The cell matching the annotation
/// reuses the base text; the others go through the rewriter. A cell whose
/// rewrite fails after transport retries is reported in `failed`.
GenerationResult generate_variants(const corpus::Narrative& base, const SubjectAnnotation& annotation,
                                   gateway::Gateway& gateway, const gateway::ProviderConfig& rewriter,
                                   std::uint64_t seed = 0);

/// Offline rewriter: swaps descriptors from the default lexicon toward the
/// target named in the rewrite instruction.
class StubRewriter final : public gateway::ChatProvider {
public:
    gateway::CompletionResult complete(const gateway::ProviderConfig& cfg,
                                       const gateway::CompletionRequest& request) override;
};

/// Descriptor swap used by StubRewriter.
std::string swap_descriptors(const std::string& text, Sex sex, Race race);

// ---------------------------------------------------------------------------
// Validation

struct DemographicLexicon {
    std::map<Sex, std::set<std::string>> sex_terms;    ///< lower-case tokens; unknown = neutral forms
    std::map<Race, std::set<std::string>> race_terms;

    bool contains(const std::string& token) const;
};

DemographicLexicon default_lexicon();

struct ValidationConfig {
    double min_length_ratio = 0.85;
    double max_length_ratio = 1.15;
    double min_similarity = 0.85;
    DemographicLexicon lexicon = default_lexicon();
};

struct ValidationReport {
    double length_ratio = 1.0;
    double similarity = 1.0;
    bool target_terms_present = true;
    bool passed = true;
    std::string notes;
};

/// Lower-case alphanumeric tokens with lexicon terms removed.
std::vector<std::string> masked_tokens(std::string_view text, const DemographicLexicon& lexicon);

/// 2 * LCS / (|a| + |b|); 1.0 for two empty sequences.
double token_similarity(const std::vector<std::string>& a, const std::vector<std::string>& b);

ValidationReport validate_variant(const corpus::Narrative& base, const VariantNarrative& variant,
                                  const ValidationConfig& config = {});

/// Runs validate_variant and stores the outcome on the variant.
void apply_validation(const corpus::Narrative& base, VariantNarrative& variant, const ValidationConfig& config = {});

// ---------------------------------------------------------------------------
// Labelling

struct VariantLabelingJob {
    labeling::LabelingConfig config;
    codebook::RenderedPrompt prompt;
};

struct VariantLabelingReport {
    std::vector<labeling::RunReport> runs;
    std::size_t labelled_variants = 0;
    std::size_t excluded_unvalidated = 0;
};

/// Label validated (or explicitly approved) variants under every job.
/// Records use variant_id() as the narrative id, so each maps back to one
/// base.
VariantLabelingReport label_variants(const std::vector<VariantNarrative>& variants,
                                     const std::vector<VariantLabelingJob>& jobs, gateway::Gateway& gateway,
                                     const std::filesystem::path& runs_root,
                                     const std::set<std::string>& approved_ids = {},
                                     const labeling::RunOptions& options = {});

}  // namespace vulnlens::counterfactual
