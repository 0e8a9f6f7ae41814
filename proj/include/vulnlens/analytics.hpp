#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vulnlens/labeling.hpp"
#include "vulnlens/outcome.hpp"

namespace vulnlens::analytics {

using labeling::LabelOutcome;
using labeling::VoteDistribution;
using codebook::VulnerabilityId;

struct OrdinalPair {
    LabelOutcome human{};
    LabelOutcome model{};
};

/// Mean squared difference of ordinal codes. Throws DomainError when empty.
double ordinal_mse(const std::vector<OrdinalPair>& pairs);

/// Negative -> 0; Inconclusive and Positive -> 1.
int binarize(LabelOutcome o);

struct BinaryCounts {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    long n() const { return tp + fp + fn + tn; }
};

struct PrecisionRecallF1 {
    double precision = 0, recall = 0, f1 = 0;
    bool degenerate = false;  ///< some denominator was 0; that statistic reported as 0
};

PrecisionRecallF1 precision_recall_f1(const BinaryCounts& c);

/// cells[human][model], indexed by ordinal code.
struct ConfusionMatrix3 {
    std::array<std::array<long, 3>, 3> cells{};

    long at(LabelOutcome human, LabelOutcome model) const {
        return cells[labeling::ordinal(human)][labeling::ordinal(model)];
    }
    long total() const;
    long row_sum(LabelOutcome human) const;
    long col_sum(LabelOutcome model) const;
    /// Counts after binarizing both axes; the human label is the truth.
    BinaryCounts binary() const;
};

/// Throws DomainError when empty.
ConfusionMatrix3 confusion_matrix(const std::vector<OrdinalPair>& pairs);

/// Shannon entropy in bits over valid votes. Throws DomainError when every
/// vote is Missing.
double vote_entropy(const VoteDistribution& votes);

inline constexpr int kDefaultBootstrap = 10000;

struct EntropyStat {
    std::vector<double> per_item_entropy;
    double mean = 0, ci_low = 0, ci_high = 0;
    int n_boot = kDefaultBootstrap;
    std::uint64_t seed = 0;
};

/// Percentile bootstrap (2.5 / 97.5, linear interpolation between order
/// statistics) of the mean. Throws DomainError when `values` is empty.
EntropyStat bootstrap_mean_ci(const std::vector<double>& values, int n_boot = kDefaultBootstrap,
                              std::uint64_t seed = 0);

/// Linear-interpolation percentile of a sorted sample, q in [0, 100].
double percentile_sorted(const std::vector<double>& sorted, double q);

// ---------------------------------------------------------------------------
// Reports over stored runs

/// What reports need from a run: its identity and per-narrative votes.
struct RunView {
    std::string config_id;
    VulnerabilityId vulnerability{};
    int k = labeling::kDefaultRepeats;
    std::vector<labeling::NarrativeSummary> summaries;
};

RunView view_of(const labeling::Run& run, labeling::ConsensusRule rule = labeling::ConsensusRule::plurality);

/// Final human label per (narrative, vulnerability).
using HumanLabels = std::map<std::pair<std::string, VulnerabilityId>, LabelOutcome>;

HumanLabels human_labels_from(const labeling::HumanLabelStore& store);

/// Evaluation items of one run joined with their human labels. Throws
/// IntegrityError listing the ids that lack a human label or a summary.
struct EvaluationJoin {
    std::vector<const labeling::NarrativeSummary*> items;
    std::vector<LabelOutcome> human;
};

EvaluationJoin join_evaluation(const RunView& run, const HumanLabels& human,
                               const std::vector<std::string>& evaluation_ids);

struct AlignmentRow {
    std::string config_id;
    VulnerabilityId vulnerability{};
    long n = 0;
    double mse = 0;
    PrecisionRecallF1 prf;
    ConfusionMatrix3 confusion;
};

AlignmentRow alignment_report(const RunView& run, const HumanLabels& human,
                              const std::vector<std::string>& evaluation_ids);

enum class AgreementStratum { overall, agree, disagree };
std::string_view to_string(AgreementStratum s);

struct EntropyStratumRow {
    std::string config_id;
    VulnerabilityId vulnerability{};
    AgreementStratum agreement{};
    std::optional<LabelOutcome> consensus_label;  ///< nullopt: all labels
    long n = 0;
    std::optional<EntropyStat> stat;  ///< nullopt when the stratum is empty
};

/// One row per {overall, agree, disagree} x {all, Negative, Inconclusive,
/// Positive}. Items with every vote Missing are skipped.
std::vector<EntropyStratumRow> entropy_strata_report(const RunView& run, const HumanLabels& human,
                                                     const std::vector<std::string>& evaluation_ids,
                                                     int n_boot = kDefaultBootstrap, std::uint64_t seed = 0);

struct AgreementCurvePoint {
    int level = 0;
    LabelOutcome label{};
    long count = 0;
    double share = 0;                  ///< of all evaluation narratives
    std::optional<double> alignment;  ///< nullopt when the cell is empty
};

struct AgreementCurve {
    std::string config_id;
    VulnerabilityId vulnerability{};
    long n = 0;
    std::vector<AgreementCurvePoint> points;  ///< levels 6..k x labels
    long remainder_count = 0;                 ///< top count below 6, or a tie at the top
    double remainder_share = 0;
};

inline constexpr int kCurveMinLevel = 6;

AgreementCurve agreement_alignment_curve(const RunView& run, const HumanLabels& human,
                                         const std::vector<std::string>& evaluation_ids);

struct DistributionRow {
    std::string config_id;
    VulnerabilityId vulnerability{};
    long n = 0;
    std::array<double, 3> label_share_pct{};  ///< by consensus label ordinal
    double unanimous_negative_pct = 0;         ///< k of k valid Negative votes
};

std::vector<DistributionRow> distribution_report(const std::vector<RunView>& runs);

/// Human-readable tables with one decimal, as percentages are usually shown.
std::string format_distribution_table(const std::vector<DistributionRow>& rows);

// ---------------------------------------------------------------------------
// Serialization: long format (config, vulnerability, statistic, value)

struct LongRow {
    std::string config;
    std::string vulnerability;
    std::string statistic;
    std::optional<double> value;
};

std::vector<LongRow> to_long(const std::vector<AlignmentRow>& rows);
std::vector<LongRow> to_long(const std::vector<EntropyStratumRow>& rows);
std::vector<LongRow> to_long(const std::vector<AgreementCurve>& curves);
std::vector<LongRow> to_long(const std::vector<DistributionRow>& rows);

/// Shortest round-trip decimal form; the same value always prints the same.
std::string format_number(double v);

std::string long_csv(const std::vector<LongRow>& rows);
nlohmann::ordered_json long_json(const std::vector<LongRow>& rows);

}  // namespace vulnlens::analytics
