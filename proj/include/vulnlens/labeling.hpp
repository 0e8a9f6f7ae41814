#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "vulnlens/codebook.hpp"
#include "vulnlens/corpus.hpp"
#include "vulnlens/gateway.hpp"
#include "vulnlens/outcome.hpp"
#include "vulnlens/util/clock.hpp"

namespace vulnlens::labeling {

using codebook::PromptStrategy;
using codebook::VulnerabilityId;

inline constexpr int kDefaultRepeats = 10;

struct LabelingConfig {
    std::string config_id;
    gateway::ProviderConfig provider;
    PromptStrategy strategy = PromptStrategy::custom;
    VulnerabilityId vulnerability = VulnerabilityId::mental_ill_health;
    int k = kDefaultRepeats;
    std::uint64_t run_seed = 0;

    /// Deterministic id from (model, strategy, vulnerability, k), safe as a
    /// directory name, e.g. "llama-3-8b__custom__homelessness__k10".
    static std::string derive_id(const std::string& model_name, PromptStrategy strategy, VulnerabilityId v, int k);
};

LabelingConfig make_config(gateway::ProviderConfig provider, PromptStrategy strategy, VulnerabilityId v,
                           int k = kDefaultRepeats, std::uint64_t run_seed = 0);

enum class MissingReason { none, parse_failure, transport_failure };

std::string_view to_string(MissingReason r);

struct LabelRecord {
    std::string narrative_id;
    VulnerabilityId vulnerability{};
    std::string config_id;
    int iteration = 0;
    std::optional<LabelOutcome> outcome;  ///< nullopt: Missing
    MissingReason missing = MissingReason::none;
    std::string notes_text;
    int retries_used = 0;
    std::string timestamp;
};

nlohmann::ordered_json to_json(const LabelRecord& r);
LabelRecord record_from_json(const nlohmann::json& j);

/// Item to classify: a corpus narrative or a counterfactual variant.
struct LabelTarget {
    std::string id;
    std::string text;
};

std::vector<LabelTarget> targets_from(const std::vector<corpus::Narrative>& narratives);

/// Per-request sampling seed for one (narrative, iteration) of a run.
std::uint64_t request_seed(const LabelingConfig& cfg, const std::string& narrative_id, int iteration);

struct RunOptions {
    const util::Clock* clock = nullptr;  ///< default: system clock
    std::string code_version = "dev";
    /// Worker threads; 0 = the provider's max_concurrent.
    int concurrency = 0;
};

struct RunReport {
    std::size_t new_requests = 0;  ///< classification tasks issued this call
    std::size_t already_present = 0;
    std::size_t total_records = 0;
    std::size_t parse_missing = 0;
    std::size_t transport_missing = 0;
    std::uint64_t completion_calls = 0;
};

/// Directory of one run: `<runs_root>/<config_id>`.
std::filesystem::path run_dir(const std::filesystem::path& runs_root, const std::string& config_id);

/// Manifest content for a (config, prompt) pair; `content_hash` covers
/// everything but the creation time and code version.
nlohmann::ordered_json make_manifest(const LabelingConfig& cfg, const codebook::RenderedPrompt& prompt,
                                     const std::string& code_version, const std::string& created);

/// Produce k records per target into `<runs_root>/<config_id>/records.jsonl`.
/// Records already on disk are kept and not re-requested; a manifest whose
/// content hash disagrees with `cfg`/`prompt` makes the run non-resumable.
/// Provider failures become Missing records flagged transport_failure; any
/// other exception (an interruption) propagates after flushing the records
/// completed so far.
RunReport run_labeling(const std::vector<LabelTarget>& targets, const LabelingConfig& cfg,
                       const codebook::RenderedPrompt& prompt, gateway::Gateway& gateway,
                       const std::filesystem::path& runs_root, const RunOptions& options = {});

struct Run {
    std::filesystem::path dir;
    nlohmann::ordered_json manifest;
    LabelingConfig config;
    std::vector<LabelRecord> records;
};

Run load_run(const std::filesystem::path& dir);
std::vector<std::string> list_runs(const std::filesystem::path& runs_root);

// ---------------------------------------------------------------------------
// Votes and consensus

struct VoteDistribution {
    std::array<int, 3> counts{};  ///< indexed by ordinal
    int n_missing = 0;

    int count(LabelOutcome o) const { return counts[ordinal(o)]; }
    int n_valid() const { return counts[0] + counts[1] + counts[2]; }
    int k() const { return n_valid() + n_missing; }
};

bool operator==(const VoteDistribution& a, const VoteDistribution& b);

/// Tally the k records of one (narrative, config). Throws IntegrityError
/// unless iterations 0..k-1 are each present exactly once.
VoteDistribution tally_votes(const std::vector<LabelRecord>& records, int k);

struct ConsensusLabel {
    LabelOutcome outcome = LabelOutcome::Inconclusive;
    int agreement_level = 0;
    bool unanimous = false;
    bool tie_broken = false;  ///< no winning label; outcome forced to Inconclusive
};

bool operator==(const ConsensusLabel& a, const ConsensusLabel& b);

enum class ConsensusRule {
    plurality,        ///< unique most frequent valid label
    strict_majority,  ///< more than half of the valid votes
};

ConsensusLabel consensus(const VoteDistribution& votes, ConsensusRule rule = ConsensusRule::plurality);

/// Votes, consensus and the last notes per narrative, in first-seen order.
struct NarrativeSummary {
    std::string narrative_id;
    VoteDistribution votes;
    ConsensusLabel consensus;
    std::string latest_notes;
};

std::vector<NarrativeSummary> summarize_run(const Run& run, ConsensusRule rule = ConsensusRule::plurality);

// ---------------------------------------------------------------------------
// Evaluation sampling

struct StratumTargets {
    int negative = 100;
    int positive = 50;
    int inconclusive = 50;
};

/// Reference consensus per narrative, in a stable order.
using ReferenceLabels = std::vector<std::pair<std::string, std::map<VulnerabilityId, LabelOutcome>>>;

struct RealizedStratum {
    VulnerabilityId vulnerability{};
    LabelOutcome label{};
    int target = 0;  ///< after positive shortfall reallocation
    std::vector<std::string> narrative_ids;
};

struct EvaluationSample {
    std::vector<std::string> narrative_ids;  ///< deduplicated union
    std::vector<RealizedStratum> strata;
};

EvaluationSample sample_evaluation_set(const ReferenceLabels& reference, const StratumTargets& targets,
                                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Human labels and adjudication

enum class CoderRole { coder, adjudicator };

std::string_view to_string(CoderRole r);
std::optional<CoderRole> parse_coder_role(std::string_view s);

struct HumanLabel {
    std::string narrative_id;
    VulnerabilityId vulnerability{};
    std::string coder_id;
    CoderRole role = CoderRole::coder;
    LabelOutcome outcome{};
    std::optional<std::string> note;
    std::string timestamp;
    std::optional<std::string> idempotency_key;
    bool revision = false;
};

nlohmann::ordered_json to_json(const HumanLabel& l);
HumanLabel human_label_from_json(const nlohmann::json& j);

enum class AdjudicationSource { coder_agreement, adjudication };

std::string_view to_string(AdjudicationSource s);

struct AdjudicatedLabel {
    std::string narrative_id;
    VulnerabilityId vulnerability{};
    LabelOutcome outcome{};
    AdjudicationSource source{};
};

struct NeedsAdjudication {
    std::string narrative_id;
    VulnerabilityId vulnerability{};
    std::vector<HumanLabel> coder_labels;
};

/// Fewer than the required number of coders have labelled the item.
struct AwaitingCoders {
    std::string narrative_id;
    VulnerabilityId vulnerability{};
    std::vector<HumanLabel> coder_labels;
};

using AdjudicationState = std::variant<AwaitingCoders, NeedsAdjudication, AdjudicatedLabel>;

std::string_view state_name(const AdjudicationState& s);
nlohmann::ordered_json to_json(const AdjudicationState& s);

/// Append-only store of human labels (labels/human.jsonl). Single writer;
/// every method is safe to call from several threads.
class HumanLabelStore {
public:
    explicit HumanLabelStore(std::filesystem::path path, int required_coders = 2,
                             const util::Clock* clock = nullptr);

    /// Append a coder or adjudicator label. Returns false (and writes
    /// nothing) when the idempotency key matches an earlier identical
    /// submission. Throws ConflictError for a second label by the same
    /// coder, a coder label on a decided item, or an adjudicator label on
    /// an item that does not need adjudication.
    bool record(HumanLabel label);

    /// Replace a coder's earlier label while the item is still undecided.
    void revise(HumanLabel label);

    /// Decision for an item with at least `required_coders` labels; throws
    /// PreconditionError otherwise.
    std::variant<AdjudicatedLabel, NeedsAdjudication> adjudicate(const std::string& narrative_id,
                                                                 VulnerabilityId v) const;

    AdjudicationState state(const std::string& narrative_id, VulnerabilityId v) const;

    /// Effective coder labels (latest revision per coder).
    std::vector<HumanLabel> coder_labels(const std::string& narrative_id, VulnerabilityId v) const;

    /// Final human labels for every decided item.
    std::map<std::pair<std::string, VulnerabilityId>, AdjudicatedLabel> final_labels() const;

    std::vector<HumanLabel> all() const;
    const std::filesystem::path& path() const { return path_; }

private:
    using Key = std::pair<std::string, VulnerabilityId>;
    AdjudicationState state_locked(const Key& key) const;
    std::vector<HumanLabel> coder_labels_locked(const Key& key) const;
    void append_locked(HumanLabel label);

    std::filesystem::path path_;
    int required_coders_;
    const util::Clock* clock_;
    mutable std::mutex mu_;
    std::vector<HumanLabel> log_;
    std::map<Key, std::vector<std::size_t>> by_key_;
};

}  // namespace vulnlens::labeling
