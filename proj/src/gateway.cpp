#include "vulnlens/gateway.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "vulnlens/error.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/hash.hpp"
#include "vulnlens/util/random.hpp"
#include "vulnlens/util/text.hpp"

using nlohmann::json;
using nlohmann::ordered_json;

namespace vulnlens::gateway {

using labeling::LabelOutcome;

std::string_view to_string(Role r) {
    switch (r) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

std::optional<Role> parse_role(std::string_view s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    return std::nullopt;
}

bool operator==(const ChatMessage& a, const ChatMessage& b) { return a.role == b.role && a.content == b.content; }

void ProviderConfig::validate() const {
    if (endpoint.empty()) throw ConfigError("provider " + name + ": endpoint is empty");
    if (model_name.empty()) throw ConfigError("provider " + name + ": model_name is empty");
    if (temperature && *temperature < 0) throw ConfigError("provider " + name + ": temperature must be >= 0");
    if (max_output_tokens <= 0) throw ConfigError("provider " + name + ": max_output_tokens must be > 0");
    if (requests_per_minute <= 0) throw ConfigError("provider " + name + ": requests_per_minute must be > 0");
    if (max_concurrent <= 0) throw ConfigError("provider " + name + ": max_concurrent must be > 0");
    if (is_stub() && !meta.count("seed")) throw ConfigError("provider " + name + ": stub endpoint requires meta.seed");
}

ordered_json to_json(const ProviderConfig& cfg) {
    ordered_json j;
    j["name"] = cfg.name;
    j["endpoint"] = cfg.endpoint;
    j["model_name"] = cfg.model_name;
    j["temperature"] = cfg.temperature ? json(*cfg.temperature) : json("provider-default");
    j["max_output_tokens"] = cfg.max_output_tokens;
    j["requests_per_minute"] = cfg.requests_per_minute;
    j["max_concurrent"] = cfg.max_concurrent;
    j["auth_ref"] = cfg.auth_ref;
    j["pin_cache"] = cfg.pin_cache;
    j["meta"] = cfg.meta;
    return j;
}

ProviderConfig provider_from_json(const json& j) {
    ProviderConfig cfg;
    cfg.name = j.value("name", "");
    cfg.endpoint = j.at("endpoint").get<std::string>();
    cfg.model_name = j.at("model_name").get<std::string>();
    if (j.contains("temperature") && j["temperature"].is_number()) cfg.temperature = j["temperature"].get<double>();
    cfg.max_output_tokens = j.value("max_output_tokens", cfg.max_output_tokens);
    cfg.requests_per_minute = j.value("requests_per_minute", cfg.requests_per_minute);
    cfg.max_concurrent = j.value("max_concurrent", cfg.max_concurrent);
    cfg.auth_ref = j.value("auth_ref", "");
    cfg.pin_cache = j.value("pin_cache", false);
    if (j.contains("meta")) cfg.meta = j["meta"].get<std::map<std::string, std::string>>();
    return cfg;
}

// ---------------------------------------------------------------------------

std::atomic<std::uint64_t> HttplibTransport::sent_{0};

std::uint64_t HttplibTransport::requests_sent() { return sent_.load(); }

HttpResponse HttplibTransport::post(const std::string& url, const std::string& body,
                                    const std::vector<std::pair<std::string, std::string>>& headers) {
    ++sent_;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return {0, "", "malformed URL " + url};
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(origin);
    client.set_connection_timeout(30);
    client.set_read_timeout(300);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) return {0, "", httplib::to_string(res.error())};
    return {res->status, res->body, ""};
}

EnvLookup process_env() {
    return [](const std::string& name) -> std::optional<std::string> {
        const char* v = std::getenv(name.c_str());
        if (!v || !*v) return std::nullopt;
        return std::string(v);
    };
}

ChatCompletionsProvider::ChatCompletionsProvider(std::shared_ptr<HttpTransport> transport, EnvLookup env)
    : transport_(std::move(transport)), env_(std::move(env)) {}

std::string ChatCompletionsProvider::request_body(const ProviderConfig& cfg, const CompletionRequest& request) {
    ordered_json body;
    body["model"] = cfg.model_name;
    ordered_json messages = ordered_json::array();
    for (const auto& m : request.messages) {
        messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    }
    body["messages"] = std::move(messages);
    if (cfg.temperature) body["temperature"] = *cfg.temperature;
    body["max_tokens"] = cfg.max_output_tokens;
    if (request.seed) body["seed"] = *request.seed;
    return body.dump();
}

CompletionResult ChatCompletionsProvider::complete(const ProviderConfig& cfg, const CompletionRequest& request) {
    std::vector<std::pair<std::string, std::string>> headers;
    if (!cfg.auth_ref.empty()) {
        const auto key = env_(cfg.auth_ref);
        if (!key) throw CredentialError("provider " + cfg.name + ": environment variable " + cfg.auth_ref + " is not set");
        headers.emplace_back("Authorization", "Bearer " + *key);
    }
    const auto res = transport_->post(cfg.endpoint, request_body(cfg, request), headers);
    const std::string where = "provider " + cfg.name + " (" + cfg.endpoint + ")";
    if (res.status == 0) throw ProviderError(where + ": transport failure: " + res.error, true, 0);
    if (res.status == 401 || res.status == 403) {
        throw CredentialError(where + ": authentication rejected (HTTP " + std::to_string(res.status) + ")");
    }
    if (res.status == 408 || res.status == 429 || res.status >= 500) {
        throw ProviderError(where + ": HTTP " + std::to_string(res.status), true, res.status);
    }
    if (res.status != 200) throw ProviderError(where + ": HTTP " + std::to_string(res.status) + ": " + res.body, false, res.status);

    CompletionResult out;
    try {
        const auto j = json::parse(res.body);
        out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        out.request_id = j.value("id", "");
        if (j.contains("usage") && j["usage"].is_object()) {
            TokenUsage u;
            u.prompt_tokens = j["usage"].value("prompt_tokens", 0);
            u.completion_tokens = j["usage"].value("completion_tokens", 0);
            out.token_usage = u;
        }
    } catch (const json::exception& e) {
        throw ProviderError(where + ": malformed reply: " + e.what(), false, res.status);
    }
    if (out.text.empty()) throw ProviderError(where + ": empty completion text", false, res.status);
    return out;
}

// ---------------------------------------------------------------------------

StubSettings StubSettings::from_config(const ProviderConfig& cfg) {
    StubSettings s;
    const auto num = [&](const char* key, double fallback) {
        const auto it = cfg.meta.find(key);
        if (it == cfg.meta.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw ConfigError("provider " + cfg.name + ": meta." + key + " is not a number");
        }
    };
    const auto it = cfg.meta.find("seed");
    if (it == cfg.meta.end()) throw ConfigError("provider " + cfg.name + ": stub endpoint requires meta.seed");
    try {
        s.seed = std::stoull(it->second);
    } catch (const std::exception&) {
        throw ConfigError("provider " + cfg.name + ": meta.seed is not an integer");
    }
    s.noise = num("noise", 0.0);
    s.malform = num("malform", 0.0);
    if (s.noise < 0 || s.noise > 1 || s.malform < 0 || s.malform > 1) {
        throw ConfigError("provider " + cfg.name + ": stub noise and malform must lie in [0, 1]");
    }
    s.rules = default_stub_rules();
    return s;
}

std::vector<StubRule> default_stub_rules() {
    using O = LabelOutcome;
    return {
        {"homeless", O::Positive, "homelessness"},
        {"shelter", O::Positive, "homelessness"},
        {"sleeping bag", O::Positive, "homelessness"},
        {"asleep", O::Inconclusive, "homelessness"},
        {"unkempt", O::Inconclusive, "homelessness"},
        {"suicid", O::Positive, "mental health"},
        {"hallucinat", O::Positive, "mental health"},
        {"mental health", O::Positive, "mental health"},
        {"erratic", O::Inconclusive, "mental health"},
        {"confused", O::Inconclusive, "mental health"},
        {"heroin", O::Positive, "drug abuse"},
        {"overdose", O::Positive, "drug abuse"},
        {"fentanyl", O::Positive, "drug abuse"},
        {"syringe", O::Inconclusive, "drug abuse"},
        {"needle", O::Inconclusive, "drug abuse"},
        {"alcoholic", O::Positive, "alcohol dependence"},
        {"drinking problem", O::Positive, "alcohol dependence"},
        {"intoxicated", O::Inconclusive, "alcohol dependence"},
        {"drunk", O::Inconclusive, "alcohol dependence"},
    };
}

namespace {

// The opening of an instruction names its vulnerability: the first paragraph
// of a custom prompt, or the definition title of a codebook prompt.
std::string_view instruction_opening(std::string_view instruction) {
    std::size_t cut = instruction.find("\n\n");
    if (cut != std::string_view::npos) {
        const auto second = instruction.find("\n\n", cut + 2);
        cut = second;
    }
    return instruction.substr(0, cut == std::string_view::npos ? instruction.size() : cut);
}

struct RuleHit {
    LabelOutcome outcome = LabelOutcome::Negative;
    std::string keyword;
};

RuleHit apply_rules(const std::vector<StubRule>& rules, std::string_view instruction, std::string_view narrative) {
    const auto opening = instruction_opening(instruction);
    RuleHit hit;
    for (const auto& r : rules) {
        if (!r.context.empty() && util::ifind(opening, r.context) == std::string_view::npos) continue;
        if (util::ifind(narrative, r.keyword) == std::string_view::npos) continue;
        if (hit.keyword.empty() || labeling::ordinal(r.outcome) > labeling::ordinal(hit.outcome)) {
            hit.outcome = r.outcome;
            hit.keyword = r.keyword;
        }
    }
    return hit;
}

}  // namespace

LabelOutcome stub_rule_outcome(const std::vector<StubRule>& rules, std::string_view instruction,
                               std::string_view narrative) {
    return apply_rules(rules, instruction, narrative).outcome;
}

CompletionResult stub_complete(const StubSettings& settings, const std::vector<ChatMessage>& messages,
                               std::optional<std::uint64_t> request_seed) {
    std::string key = std::to_string(settings.seed) + "|" + (request_seed ? std::to_string(*request_seed) : "-");
    for (const auto& m : messages) {
        key += "|" + std::string(to_string(m.role)) + ":" + m.content;
    }
    const std::string digest = util::sha256_hex(key);
    util::Rng rng(util::sha256_u64(key));

    std::string_view instruction, narrative;
    for (const auto& m : messages) {
        if (m.role == Role::system && instruction.empty()) instruction = m.content;
        if (m.role == Role::user && narrative.empty()) narrative = m.content;
    }
    const RuleHit hit = apply_rules(settings.rules, instruction, narrative);
    LabelOutcome outcome = hit.outcome;
    if (rng.uniform() < settings.noise) {
        std::vector<LabelOutcome> others;
        for (auto o : labeling::kAllOutcomes) {
            if (o != outcome) others.push_back(o);
        }
        outcome = others[rng.index(others.size())];
    }
    const bool malformed = rng.uniform() < settings.malform;

    std::string notes = hit.keyword.empty()
                            ? std::string("Notes: The report contains no statement matching the definition.")
                            : "Notes: The report mentions \"" + hit.keyword + "\", which relates to the definition.";
    CompletionResult out;
    out.request_id = "stub-" + digest.substr(0, 16);
    if (malformed) {
        out.text = notes + " Overall I would call this " + std::string(labeling::to_string(outcome)) + ".";
    } else {
        out.text = notes + "\n\nClassification: " + std::string(labeling::prompt_token(outcome));
    }
    return out;
}

CompletionResult StubProvider::complete(const ProviderConfig& cfg, const CompletionRequest& request) {
    return stub_complete(StubSettings::from_config(cfg), request.messages, request.seed);
}

std::shared_ptr<ChatProvider> default_provider() {
    return std::make_shared<RoutingProvider>(
        std::make_shared<StubProvider>(),
        std::make_shared<ChatCompletionsProvider>(std::make_shared<HttplibTransport>()));
}

// ---------------------------------------------------------------------------

MonotonicClock::duration SteadyClock::now() const {
    return std::chrono::duration_cast<duration>(std::chrono::steady_clock::now().time_since_epoch());
}

void SteadyClock::sleep_for(duration d) {
    if (d.count() > 0) std::this_thread::sleep_for(d);
}

void FakeClock::sleep_for(duration d) {
    {
        std::lock_guard lk(mu_);
        sleeps_.push_back(d);
    }
    if (d.count() > 0) now_ms_ += d.count();
}

std::vector<FakeClock::duration> FakeClock::sleeps() const {
    std::lock_guard lk(mu_);
    return sleeps_;
}

RateLimiter::RateLimiter(int requests_per_minute, int max_concurrent, MonotonicClock& clock)
    : rpm_(requests_per_minute), max_concurrent_(max_concurrent), clock_(clock) {
    if (rpm_ <= 0 || max_concurrent_ <= 0) throw ConfigError("rate limits must be positive");
}

RateLimiter::Permit RateLimiter::acquire() {
    constexpr MonotonicClock::duration kWindow{60'000};
    std::unique_lock lk(mu_);
    while (true) {
        const auto now = clock_.now();
        while (!window_.empty() && window_.front() <= now - kWindow) window_.pop_front();
        if (in_flight_ >= max_concurrent_) {
            cv_.wait(lk);
            continue;
        }
        if (static_cast<int>(window_.size()) < rpm_) {
            window_.push_back(now);
            admitted_.push_back(now);
            ++in_flight_;
            return Permit(this);
        }
        const auto wait = window_.front() + kWindow - now;
        lk.unlock();
        clock_.sleep_for(wait);
        lk.lock();
    }
}

void RateLimiter::release() {
    {
        std::lock_guard lk(mu_);
        --in_flight_;
    }
    cv_.notify_one();
}

std::vector<MonotonicClock::duration> RateLimiter::admitted() const {
    std::lock_guard lk(mu_);
    return admitted_;
}

int RateLimiter::in_flight() const {
    std::lock_guard lk(mu_);
    return in_flight_;
}

// ---------------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.empty()) return;
    for (const auto& row : util::read_jsonl(path_)) {
        CompletionResult r;
        r.text = row.at("text").get<std::string>();
        r.request_id = row.value("request_id", "");
        r.from_cache = true;
        entries_[row.at("key").get<std::string>()] = std::move(r);
    }
}

std::string ResponseCache::key(const ProviderConfig& cfg, const CompletionRequest& request) {
    ordered_json j;
    j["endpoint"] = cfg.endpoint;
    j["model"] = cfg.model_name;
    j["temperature"] = cfg.temperature ? json(*cfg.temperature) : json(nullptr);
    j["max_tokens"] = cfg.max_output_tokens;
    j["seed"] = request.seed ? json(*request.seed) : json(nullptr);
    ordered_json msgs = ordered_json::array();
    for (const auto& m : request.messages) msgs.push_back({to_string(m.role), m.content});
    j["messages"] = std::move(msgs);
    return util::sha256_hex(j.dump());
}

bool ResponseCache::applies(const ProviderConfig& cfg) {
    return cfg.pin_cache || (cfg.temperature && *cfg.temperature == 0.0);
}

std::optional<CompletionResult> ResponseCache::get(const std::string& key) const {
    std::shared_lock lk(mu_);
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void ResponseCache::put(const std::string& key, const CompletionResult& result) {
    std::unique_lock lk(mu_);
    if (entries_.count(key)) return;
    CompletionResult stored = result;
    stored.from_cache = true;
    entries_[key] = stored;
    if (!path_.empty()) {
        util::JsonlAppender out(path_);
        ordered_json row;
        row["key"] = key;
        row["text"] = result.text;
        row["request_id"] = result.request_id;
        out.append(row);
    }
}

std::size_t ResponseCache::size() const {
    std::shared_lock lk(mu_);
    return entries_.size();
}

void ResponseCache::compact() const {
    if (path_.empty() || !std::filesystem::exists(path_)) return;
    std::shared_lock lk(mu_);
    std::vector<const std::string*> keys;
    for (const auto& [k, v] : entries_) keys.push_back(&k);
    std::sort(keys.begin(), keys.end(), [](const auto* a, const auto* b) { return *a < *b; });
    std::string out;
    for (const auto* k : keys) {
        const auto& r = entries_.at(*k);
        ordered_json row;
        row["key"] = *k;
        row["text"] = r.text;
        row["request_id"] = r.request_id;
        out += row.dump() + "\n";
    }
    util::write_atomic(path_, out);
}

// ---------------------------------------------------------------------------

Gateway::~Gateway() {
    try {
        cache_.compact();
    } catch (...) {
        // The append log is still valid, just unsorted.
    }
}

Gateway::Gateway(std::shared_ptr<ChatProvider> provider, GatewayOptions options)
    : provider_(std::move(provider)),
      retry_(options.retry),
      clock_(options.clock ? std::move(options.clock) : std::make_shared<SteadyClock>()),
      cache_(options.cache_path) {}

RateLimiter& Gateway::limiter_for(const ProviderConfig& cfg) {
    std::lock_guard lk(limiters_mu_);
    const std::string key = cfg.endpoint + "|" + cfg.model_name;
    auto& slot = limiters_[key];
    if (!slot) slot = std::make_unique<RateLimiter>(cfg.requests_per_minute, cfg.max_concurrent, *clock_);
    return *slot;
}

CompletionResult Gateway::send_chat(const ProviderConfig& cfg, const std::vector<ChatMessage>& messages,
                                    std::optional<std::uint64_t> seed) {
    if (messages.empty()) throw PreconditionError("send_chat: messages must not be empty");
    if (messages.front().role == Role::assistant) {
        throw PreconditionError("send_chat: first message must be a system or user message");
    }
    for (const auto& m : messages) {
        if (m.content.empty()) throw PreconditionError("send_chat: message content must not be empty");
    }
    cfg.validate();

    const CompletionRequest request{messages, seed};
    const bool cacheable = ResponseCache::applies(cfg);
    std::string cache_key;
    if (cacheable) {
        cache_key = ResponseCache::key(cfg, request);
        if (auto hit = cache_.get(cache_key)) {
            ++cache_hits_;
            return *hit;
        }
    }

    auto delay = retry_.initial_backoff;
    for (int attempt = 1;; ++attempt) {
        try {
            std::optional<RateLimiter::Permit> permit;
            if (!cfg.is_stub()) permit.emplace(limiter_for(cfg).acquire());
            const auto started = clock_->now();
            ++calls_;
            CompletionResult result = provider_->complete(cfg, request);
            result.latency_ms = (clock_->now() - started).count();
            result.attempts = attempt;
            if (cacheable) cache_.put(cache_key, result);
            return result;
        } catch (const ProviderError& e) {
            if (!e.transient()) throw;
            if (attempt >= retry_.max_attempts) {
                throw ProviderError("gave up after " + std::to_string(attempt) + " attempts: " + e.what(), false,
                                    e.status());
            }
        }
        double u;
        {
            std::lock_guard lk(jitter_mu_);
            jitter_state_ = jitter_state_ * 6364136223846793005ULL + 1442695040888963407ULL;
            u = static_cast<double>(jitter_state_ >> 11) * 0x1.0p-53;
        }
        const double factor = 1.0 + retry_.jitter * (2.0 * u - 1.0);
        clock_->sleep_for(std::chrono::milliseconds(static_cast<std::int64_t>(delay.count() * factor)));
        delay = std::chrono::milliseconds(static_cast<std::int64_t>(delay.count() * retry_.multiplier));
    }
}

ClassificationResult classify_with_retry(Gateway& gateway, const ProviderConfig& cfg,
                                         const codebook::RenderedPrompt& instruction, std::string_view narrative_text,
                                         std::optional<std::uint64_t> seed) {
    if (narrative_text.empty()) throw PreconditionError("classify_with_retry: narrative text is empty");
    ClassificationResult out;
    out.transcript.push_back({Role::system, instruction.instruction_text});
    out.transcript.push_back({Role::user, std::string(narrative_text)});
    while (true) {
        const auto reply = gateway.send_chat(cfg, out.transcript, seed);
        ++out.completion_calls;
        out.transcript.push_back({Role::assistant, reply.text});
        out.notes_text = reply.text;
        if (auto parsed = labeling::parse_classification(reply.text)) {
            out.outcome = parsed;
            return out;
        }
        if (out.retries_used == kMaxReformatRounds) return out;
        ++out.retries_used;
        out.transcript.push_back({Role::user, codebook::reformat_message()});
    }
}

}  // namespace vulnlens::gateway
