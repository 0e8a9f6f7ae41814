#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vulnlens/labeling.hpp"
#include "vulnlens/util/clock.hpp"

namespace vulnlens::service {

/// File layout shared by the CLI and the service, rooted at --out-dir.
struct Workspace {
    std::filesystem::path root;

    std::filesystem::path raw() const { return root / "raw.jsonl"; }
    std::filesystem::path corpus() const { return root / "corpus.jsonl"; }
    std::filesystem::path corpus_stats() const { return root / "corpus_stats.json"; }
    std::filesystem::path runs() const { return root / "runs"; }
    std::filesystem::path sample() const { return root / "sample.json"; }
    std::filesystem::path human_labels() const { return root / "labels" / "human.jsonl"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path counterfactual() const { return root / "counterfactual"; }
    std::filesystem::path candidates() const { return counterfactual() / "candidates.json"; }
    std::filesystem::path worksheet() const { return counterfactual() / "worksheet.csv"; }
    std::filesystem::path variants() const { return counterfactual() / "variants.jsonl"; }
    std::filesystem::path bias() const { return root / "bias"; }
    std::filesystem::path cache() const { return root / "cache" / "responses.jsonl"; }
};

enum class FlagReason { human_llm_disagreement, inconclusive_consensus, low_agreement, counterfactual_validation_failure };

/// In severity order, most severe first.
inline constexpr FlagReason kAllFlags[] = {FlagReason::human_llm_disagreement, FlagReason::inconclusive_consensus,
                                           FlagReason::low_agreement, FlagReason::counterfactual_validation_failure};

std::string_view to_string(FlagReason f);
std::optional<FlagReason> parse_flag(std::string_view s);

inline constexpr int kDefaultAgreementThreshold = 8;
inline constexpr int kDefaultPageSize = 50;

struct Coder {
    std::string coder_id;
    labeling::CoderRole role = labeling::CoderRole::coder;
};

/// Bearer token -> coder. Loaded from a JSON object
/// {"<token>": {"coder_id": "...", "role": "coder" | "adjudicator"}}.
using TokenTable = std::map<std::string, Coder>;

TokenTable load_tokens(const std::filesystem::path& path);

struct Request {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::map<std::string, std::string> headers;  ///< keys lower-case
    std::string body;
};

struct Response {
    int status = 200;
    nlohmann::ordered_json body;
};

struct ServiceOptions {
    int agreement_threshold = kDefaultAgreementThreshold;
    int page_size = kDefaultPageSize;
    const util::Clock* clock = nullptr;
};

struct QueueQuery {
    std::optional<codebook::VulnerabilityId> vulnerability;
    std::set<FlagReason> filter;  ///< empty: every flag
    int agreement_threshold = kDefaultAgreementThreshold;
    int page = 1;  ///< 1-based
    int page_size = kDefaultPageSize;
};

/// Read side computes everything from the stores on each request; label
/// submissions go through a single HumanLabelStore.
class ReviewService {
public:
    ReviewService(Workspace workspace, TokenTable tokens, ServiceOptions options = {});

    Response handle(const Request& request);

    nlohmann::ordered_json list_runs() const;
    nlohmann::ordered_json run_summary(const std::string& run_id) const;
    nlohmann::ordered_json review_queue(const std::string& run_id, const QueueQuery& query) const;
    /// Full, unpaginated queue items in order.
    std::vector<nlohmann::ordered_json> queue_items(const std::string& run_id, const QueueQuery& query) const;
    nlohmann::ordered_json submit_label(const std::string& narrative_id, const std::string& vulnerability,
                                        const std::string& token, const nlohmann::json& body,
                                        const std::optional<std::string>& idempotency_key, bool* created);
    nlohmann::ordered_json report(const std::string& type, const std::optional<std::string>& run_id) const;

    labeling::HumanLabelStore& labels() { return *labels_; }

private:
    Workspace ws_;
    TokenTable tokens_;
    ServiceOptions options_;
    std::unique_ptr<labeling::HumanLabelStore> labels_;
};

/// HTTP status for an Error code.
int status_for(const std::string& code);

/// Bind the service to host:port and block until the server stops.
void serve(ReviewService& service, const std::string& host, int port);

}  // namespace vulnlens::service
