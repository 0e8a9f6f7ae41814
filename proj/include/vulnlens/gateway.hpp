#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vulnlens/codebook.hpp"
#include "vulnlens/outcome.hpp"

namespace vulnlens::gateway {

enum class Role { system, user, assistant };

std::string_view to_string(Role r);
std::optional<Role> parse_role(std::string_view s);

struct ChatMessage {
    Role role{};
    std::string content;
};

bool operator==(const ChatMessage& a, const ChatMessage& b);

inline constexpr std::string_view kStubEndpoint = "stub";

struct ProviderConfig {
    std::string name;      ///< key used in run configuration files
    std::string endpoint;  ///< chat-completions URL, or "stub"
    std::string model_name;
    std::optional<double> temperature;  ///< unset: provider default (not sent)
    int max_output_tokens = 1024;
    int requests_per_minute = 60;
    int max_concurrent = 4;
    std::string auth_ref;  ///< environment variable holding the API key
    bool pin_cache = false;  ///< cache replies even when temperature > 0
    std::map<std::string, std::string> meta;  ///< stub: seed, noise, malform

    bool is_stub() const { return endpoint == kStubEndpoint; }

    /// Throws ConfigError on out-of-range settings or a stub without a seed.
    void validate() const;
};

/// Serialized settings for manifests. Credentials are never included; only
/// the name of the environment variable is.
nlohmann::ordered_json to_json(const ProviderConfig& cfg);
ProviderConfig provider_from_json(const nlohmann::json& j);

struct TokenUsage {
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

struct CompletionRequest {
    std::vector<ChatMessage> messages;
    /// Per-request sampling seed (iteration-specific). Sent to live endpoints
    /// as "seed"; mixed into the stub's reply hash.
    std::optional<std::uint64_t> seed;
};

struct CompletionResult {
    std::string text;
    std::string request_id;
    std::int64_t latency_ms = 0;
    std::optional<TokenUsage> token_usage;
    int attempts = 1;  ///< transport attempts, including the successful one
    bool from_cache = false;
};

class ChatProvider {
public:
    virtual ~ChatProvider() = default;
    virtual CompletionResult complete(const ProviderConfig& cfg, const CompletionRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// HTTP transport and the chat-completions provider

struct HttpResponse {
    int status = 0;  ///< 0: connection failure or timeout
    std::string body;
    std::string error;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse post(const std::string& url, const std::string& body,
                              const std::vector<std::pair<std::string, std::string>>& headers) = 0;
};

/// cpp-httplib backed transport. Every request increments a process-wide
/// counter so tests can assert that stub runs stay off the network.
class HttplibTransport final : public HttpTransport {
public:
    HttpResponse post(const std::string& url, const std::string& body,
                      const std::vector<std::pair<std::string, std::string>>& headers) override;

    static std::uint64_t requests_sent();

private:
    static std::atomic<std::uint64_t> sent_;
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

EnvLookup process_env();

/// Speaks the common chat-completions wire shape: POST {model, messages,
/// [temperature], max_tokens, [seed]}, reply choices[0].message.content.
class ChatCompletionsProvider final : public ChatProvider {
public:
    ChatCompletionsProvider(std::shared_ptr<HttpTransport> transport, EnvLookup env = process_env());

    CompletionResult complete(const ProviderConfig& cfg, const CompletionRequest& request) override;

    static std::string request_body(const ProviderConfig& cfg, const CompletionRequest& request);

private:
    std::shared_ptr<HttpTransport> transport_;
    EnvLookup env_;
};

// ---------------------------------------------------------------------------
// Deterministic stub

struct StubRule {
    std::string keyword;  ///< case-insensitive substring of the narrative
    labeling::LabelOutcome outcome{};
    std::string context;  ///< must appear in the instruction's opening; empty = any
};

struct StubSettings {
    std::uint64_t seed = 0;
    double noise = 0.0;    ///< probability of flipping to another label
    double malform = 0.0;  ///< probability of omitting the classification line
    std::vector<StubRule> rules;

    static StubSettings from_config(const ProviderConfig& cfg);
};

/// Keyword rules for the four shipped vulnerabilities.
std::vector<StubRule> default_stub_rules();

/// Rule-based outcome for (instruction, narrative) before noise.
labeling::LabelOutcome stub_rule_outcome(const std::vector<StubRule>& rules, std::string_view instruction,
                                         std::string_view narrative);

/// Deterministic reply seeded by hash(seed, request seed, messages).
CompletionResult stub_complete(const StubSettings& settings, const std::vector<ChatMessage>& messages,
                               std::optional<std::uint64_t> request_seed = std::nullopt);

class StubProvider final : public ChatProvider {
public:
    CompletionResult complete(const ProviderConfig& cfg, const CompletionRequest& request) override;
};

/// Sends stub configs to the stub and everything else to `live`.
class RoutingProvider final : public ChatProvider {
public:
    RoutingProvider(std::shared_ptr<ChatProvider> stub, std::shared_ptr<ChatProvider> live)
        : stub_(std::move(stub)), live_(std::move(live)) {}

    CompletionResult complete(const ProviderConfig& cfg, const CompletionRequest& request) override {
        return cfg.is_stub() ? stub_->complete(cfg, request) : live_->complete(cfg, request);
    }

private:
    std::shared_ptr<ChatProvider> stub_;
    std::shared_ptr<ChatProvider> live_;
};

std::shared_ptr<ChatProvider> default_provider();

// ---------------------------------------------------------------------------
// Throttling

class MonotonicClock {
public:
    using duration = std::chrono::milliseconds;
    virtual ~MonotonicClock() = default;
    virtual duration now() const = 0;
    virtual void sleep_for(duration d) = 0;
};

class SteadyClock final : public MonotonicClock {
public:
    duration now() const override;
    void sleep_for(duration d) override;
};

/// Test clock: sleeping advances time instantly and records the request.
class FakeClock final : public MonotonicClock {
public:
    duration now() const override { return duration(now_ms_.load()); }
    void sleep_for(duration d) override;
    std::vector<duration> sleeps() const;

private:
    std::atomic<std::int64_t> now_ms_{0};
    mutable std::mutex mu_;
    std::vector<duration> sleeps_;
};

/// Sliding 60-second request window plus an in-flight cap.
class RateLimiter {
public:
    RateLimiter(int requests_per_minute, int max_concurrent, MonotonicClock& clock);

    class Permit {
    public:
        explicit Permit(RateLimiter* owner) : owner_(owner) {}
        Permit(Permit&& other) noexcept : owner_(std::exchange(other.owner_, nullptr)) {}
        Permit& operator=(Permit&&) = delete;
        ~Permit() {
            if (owner_) owner_->release();
        }

    private:
        RateLimiter* owner_;
    };

    Permit acquire();

    /// Start times of admitted requests (for audit and tests).
    std::vector<MonotonicClock::duration> admitted() const;
    int in_flight() const;

private:
    void release();

    int rpm_;
    int max_concurrent_;
    MonotonicClock& clock_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<MonotonicClock::duration> window_;
    std::vector<MonotonicClock::duration> admitted_;
    int in_flight_ = 0;
};

// ---------------------------------------------------------------------------
// Response cache

class ResponseCache {
public:
    /// In-memory only when `path` is empty; otherwise loads and appends to a
    /// JSON-lines file.
    explicit ResponseCache(std::filesystem::path path = {});

    static std::string key(const ProviderConfig& cfg, const CompletionRequest& request);
    static bool applies(const ProviderConfig& cfg);

    std::optional<CompletionResult> get(const std::string& key) const;
    void put(const std::string& key, const CompletionResult& result);
    std::size_t size() const;

    /// Rewrite the file sorted by key, so its bytes do not depend on the
    /// order in which concurrent workers finished.
    void compact() const;

private:
    std::filesystem::path path_;
    mutable std::shared_mutex mu_;
    std::unordered_map<std::string, CompletionResult> entries_;
};

// ---------------------------------------------------------------------------
// Gateway

struct RetryPolicy {
    int max_attempts = 5;
    std::chrono::milliseconds initial_backoff{1000};
    double multiplier = 2.0;
    double jitter = 0.25;  ///< +/- fraction applied to each delay
};

struct GatewayOptions {
    std::filesystem::path cache_path;
    RetryPolicy retry;
    std::shared_ptr<MonotonicClock> clock;  ///< default: SteadyClock
};

class Gateway {
public:
    explicit Gateway(std::shared_ptr<ChatProvider> provider, GatewayOptions options = {});
    /// Compacts the cache file.
    ~Gateway();
    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    /// One completion with transport retries, throttling and caching.
    CompletionResult send_chat(const ProviderConfig& cfg, const std::vector<ChatMessage>& messages,
                               std::optional<std::uint64_t> seed = std::nullopt);

    /// Completion attempts handed to the provider (cache hits excluded).
    std::uint64_t calls_issued() const { return calls_.load(); }
    std::uint64_t cache_hits() const { return cache_hits_.load(); }
    const ResponseCache& cache() const { return cache_; }
    MonotonicClock& clock() { return *clock_; }

private:
    RateLimiter& limiter_for(const ProviderConfig& cfg);

    std::shared_ptr<ChatProvider> provider_;
    RetryPolicy retry_;
    std::shared_ptr<MonotonicClock> clock_;
    ResponseCache cache_;
    std::mutex limiters_mu_;
    std::map<std::string, std::unique_ptr<RateLimiter>> limiters_;
    std::atomic<std::uint64_t> calls_{0};
    std::atomic<std::uint64_t> cache_hits_{0};
    std::mutex jitter_mu_;
    std::uint64_t jitter_state_ = 0x9E3779B97F4A7C15ULL;
};

/// Parse-retry cap: one initial request plus this many reformat rounds.
inline constexpr int kMaxReformatRounds = 3;

struct ClassificationResult {
    std::optional<labeling::LabelOutcome> outcome;  ///< nullopt: Missing
    std::string notes_text;  ///< full text of the final reply
    int retries_used = 0;
    std::vector<ChatMessage> transcript;
    int completion_calls = 0;
};

/// Instruction as the system message, narrative as the user message; on a
/// parse failure append the reformat request and re-send, at most three
/// times, then give up with a Missing outcome.
ClassificationResult classify_with_retry(Gateway& gateway, const ProviderConfig& cfg,
                                         const codebook::RenderedPrompt& instruction, std::string_view narrative_text,
                                         std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace vulnlens::gateway
