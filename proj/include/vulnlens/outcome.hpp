#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace vulnlens::labeling {

/// Three-way classification with its fixed ordinal code.
enum class LabelOutcome : int { Negative = 0, Inconclusive = 1, Positive = 2 };

inline constexpr std::array<LabelOutcome, 3> kAllOutcomes = {LabelOutcome::Negative, LabelOutcome::Inconclusive,
                                                             LabelOutcome::Positive};

constexpr int ordinal(LabelOutcome o) { return static_cast<int>(o); }

/// Lower-case storage token: "negative", "inconclusive", "positive".
std::string_view to_string(LabelOutcome o);

/// Accepts the storage token or the upper-case prompt token.
std::optional<LabelOutcome> parse_outcome(std::string_view s);

/// Upper-case token as it appears in prompts and replies.
std::string_view prompt_token(LabelOutcome o);

/// Extract the classification from a model reply: the last case-insensitive
/// "classification", then optional punctuation, brackets, quotes and
/// whitespace, then exactly one of the three tokens. nullopt signals the
/// reformat path.
std::optional<LabelOutcome> parse_classification(std::string_view reply);

}  // namespace vulnlens::labeling
