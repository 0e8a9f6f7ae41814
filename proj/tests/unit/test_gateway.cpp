#include <gtest/gtest.h>

#include <thread>

#include <json.hpp>

#include "scripted.hpp"
#include "vulnlens/codebook.hpp"
#include "vulnlens/error.hpp"
#include "vulnlens/gateway.hpp"
#include "vulnlens/util/files.hpp"
#include "workspace.hpp"

using namespace vulnlens;
using namespace vulnlens::gateway;
using labeling::LabelOutcome;
using testkit::Permanent;
using testkit::ScriptedProvider;
using testkit::Transient;

namespace {

GatewayOptions fake_clock_options(std::shared_ptr<FakeClock> clock = std::make_shared<FakeClock>()) {
    GatewayOptions o;
    o.clock = std::move(clock);
    return o;
}

codebook::RenderedPrompt prompt() { return {"Decide whether the report shows the thing.\n\nClassification: [POSITIVE, INCONCLUSIVE, NEGATIVE]"}; }

const std::string kBad = "I am not sure how to answer.";

}  // namespace

// ---------------------------------------------------------------------------
// Reformat protocol

class RetryPaths : public ::testing::TestWithParam<int> {};

TEST_P(RetryPaths, SucceedsAfterNReformatRounds) {
    const int failures = GetParam();
    std::vector<testkit::Step> script(failures, kBad);
    script.push_back(std::string("Notes: ok\nClassification: POSITIVE"));
    auto provider = std::make_shared<ScriptedProvider>(script);
    Gateway gw(provider, fake_clock_options());
    const auto r = classify_with_retry(gw, testkit::scripted_config(), prompt(), "narrative text");
    ASSERT_TRUE(r.outcome);
    EXPECT_EQ(*r.outcome, LabelOutcome::Positive);
    EXPECT_EQ(r.retries_used, failures);
    EXPECT_EQ(r.completion_calls, failures + 1);
    EXPECT_EQ(provider->requests().size(), static_cast<std::size_t>(failures + 1));
    // system, user, then (assistant, reformat) per failed round, then the final reply.
    ASSERT_EQ(r.transcript.size(), static_cast<std::size_t>(3 + 2 * failures));
    for (int i = 0; i < failures; ++i) {
        EXPECT_EQ(r.transcript[3 + 2 * i].role, Role::user);
        EXPECT_EQ(r.transcript[3 + 2 * i].content, codebook::reformat_message());
    }
}

INSTANTIATE_TEST_SUITE_P(Gateway, RetryPaths, ::testing::Values(0, 1, 2, 3));

TEST(Retry, MissingAfterThreeReformatFailures) {
    auto provider = std::make_shared<ScriptedProvider>(std::vector<testkit::Step>{}, kBad);
    Gateway gw(provider, fake_clock_options());
    const auto r = classify_with_retry(gw, testkit::scripted_config(), prompt(), "narrative text");
    EXPECT_FALSE(r.outcome);
    EXPECT_EQ(r.retries_used, 3);
    EXPECT_EQ(r.completion_calls, 4);
    EXPECT_EQ(provider->requests().size(), 4u);
    EXPECT_EQ(r.notes_text, kBad);
}

TEST(Retry, EmptyNarrativeIsRejected) {
    Gateway gw(std::make_shared<ScriptedProvider>(), fake_clock_options());
    EXPECT_THROW(classify_with_retry(gw, testkit::scripted_config(), prompt(), ""), PreconditionError);
}

// ---------------------------------------------------------------------------
// Transport retries

TEST(Transport, TransientFailuresBackOffThenSucceed) {
    auto clock = std::make_shared<FakeClock>();
    auto provider = std::make_shared<ScriptedProvider>(
        std::vector<testkit::Step>{Transient{429}, Transient{0}, std::string("Classification: NEGATIVE")});
    Gateway gw(provider, fake_clock_options(clock));
    const auto r = gw.send_chat(testkit::scripted_config(), {{Role::user, "hi"}});
    EXPECT_EQ(r.attempts, 3);
    EXPECT_EQ(gw.calls_issued(), 3u);
    const auto sleeps = clock->sleeps();
    ASSERT_EQ(sleeps.size(), 2u);
    EXPECT_GE(sleeps[0].count(), 750);
    EXPECT_LE(sleeps[0].count(), 1250);
    EXPECT_GE(sleeps[1].count(), 1500);
    EXPECT_LE(sleeps[1].count(), 2500);
}

TEST(Transport, GivesUpAfterMaxAttempts) {
    auto provider = std::make_shared<ScriptedProvider>(std::vector<testkit::Step>(10, Transient{503}));
    Gateway gw(provider, fake_clock_options());
    try {
        gw.send_chat(testkit::scripted_config(), {{Role::user, "hi"}});
        FAIL();
    } catch (const ProviderError& e) {
        EXPECT_FALSE(e.transient());
        EXPECT_EQ(e.status(), 503);
    }
    EXPECT_EQ(provider->requests().size(), 5u);
}

TEST(Transport, PermanentFailurePropagatesImmediately) {
    auto provider = std::make_shared<ScriptedProvider>(std::vector<testkit::Step>{Permanent{400}});
    Gateway gw(provider, fake_clock_options());
    EXPECT_THROW(gw.send_chat(testkit::scripted_config(), {{Role::user, "hi"}}), ProviderError);
    EXPECT_EQ(provider->requests().size(), 1u);
}

TEST(Transport, RejectsMalformedMessageLists) {
    Gateway gw(std::make_shared<ScriptedProvider>(), fake_clock_options());
    const auto cfg = testkit::scripted_config();
    EXPECT_THROW(gw.send_chat(cfg, {}), PreconditionError);
    EXPECT_THROW(gw.send_chat(cfg, {{Role::assistant, "x"}}), PreconditionError);
    EXPECT_THROW(gw.send_chat(cfg, {{Role::user, ""}}), PreconditionError);
}

// ---------------------------------------------------------------------------
// Cache

TEST(Cache, ZeroTemperatureRepliesAreReused) {
    auto provider = std::make_shared<ScriptedProvider>(
        std::vector<testkit::Step>{std::string("first"), std::string("second")});
    Gateway gw(provider, fake_clock_options());
    auto cfg = testkit::scripted_config();
    cfg.temperature = 0.0;
    EXPECT_EQ(gw.send_chat(cfg, {{Role::user, "hi"}}, 3).text, "first");
    const auto again = gw.send_chat(cfg, {{Role::user, "hi"}}, 3);
    EXPECT_EQ(again.text, "first");
    EXPECT_TRUE(again.from_cache);
    EXPECT_EQ(gw.calls_issued(), 1u);
    EXPECT_EQ(gw.cache_hits(), 1u);
    // A different request seed is a different key.
    EXPECT_EQ(gw.send_chat(cfg, {{Role::user, "hi"}}, 4).text, "second");
}

TEST(Cache, SampledRepliesAreNotCachedUnlessPinned) {
    auto cfg = testkit::scripted_config();
    EXPECT_FALSE(ResponseCache::applies(cfg));
    cfg.temperature.reset();
    EXPECT_FALSE(ResponseCache::applies(cfg));
    cfg.pin_cache = true;
    EXPECT_TRUE(ResponseCache::applies(cfg));

    auto provider = std::make_shared<ScriptedProvider>(
        std::vector<testkit::Step>{std::string("a"), std::string("b")});
    Gateway gw(provider, fake_clock_options());
    auto sampled = testkit::scripted_config();
    EXPECT_EQ(gw.send_chat(sampled, {{Role::user, "hi"}}).text, "a");
    EXPECT_EQ(gw.send_chat(sampled, {{Role::user, "hi"}}).text, "b");
}

TEST(Cache, PersistsAcrossGateways) {
    testkit::TempDir dir;
    auto cfg = testkit::scripted_config();
    cfg.temperature = 0.0;
    {
        GatewayOptions o = fake_clock_options();
        o.cache_path = dir / "cache.jsonl";
        Gateway gw(std::make_shared<ScriptedProvider>(std::vector<testkit::Step>{std::string("stored")}), o);
        gw.send_chat(cfg, {{Role::user, "hi"}});
    }
    GatewayOptions o = fake_clock_options();
    o.cache_path = dir / "cache.jsonl";
    auto provider = std::make_shared<ScriptedProvider>();
    Gateway gw(provider, o);
    EXPECT_EQ(gw.send_chat(cfg, {{Role::user, "hi"}}).text, "stored");
    EXPECT_TRUE(provider->requests().empty());
}

TEST(Cache, FileIsSortedByKeyOnceTheGatewayCloses) {
    testkit::TempDir dir;
    auto cfg = testkit::scripted_config();
    cfg.temperature = 0.0;
    {
        GatewayOptions o = fake_clock_options();
        o.cache_path = dir / "cache.jsonl";
        Gateway gw(std::make_shared<ScriptedProvider>(), o);
        for (const char* m : {"c", "a", "b", "d"}) gw.send_chat(cfg, {{Role::user, m}});
    }
    std::vector<std::string> keys;
    for (const auto& row : util::read_jsonl(dir / "cache.jsonl")) keys.push_back(row["key"]);
    ASSERT_EQ(keys.size(), 4u);
    EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
    EXPECT_EQ(ResponseCache(dir / "cache.jsonl").size(), 4u);
}

TEST(Cache, KeyCoversModelAndMessages) {
    auto cfg = testkit::scripted_config();
    const CompletionRequest a{{{Role::user, "x"}}, 1};
    const CompletionRequest b{{{Role::user, "y"}}, 1};
    EXPECT_NE(ResponseCache::key(cfg, a), ResponseCache::key(cfg, b));
    auto other = cfg;
    other.model_name = "another";
    EXPECT_NE(ResponseCache::key(cfg, a), ResponseCache::key(other, a));
    EXPECT_EQ(ResponseCache::key(cfg, a), ResponseCache::key(cfg, a));
}

// ---------------------------------------------------------------------------
// Throttling

TEST(RateLimit, SlidingWindowDelaysExcessRequests) {
    FakeClock clock;
    RateLimiter limiter(2, 10, clock);
    { auto p = limiter.acquire(); }
    { auto p = limiter.acquire(); }
    { auto p = limiter.acquire(); }
    const auto admitted = limiter.admitted();
    ASSERT_EQ(admitted.size(), 3u);
    EXPECT_EQ(admitted[0].count(), 0);
    EXPECT_EQ(admitted[1].count(), 0);
    EXPECT_EQ(admitted[2].count(), 60000);
}

TEST(RateLimit, ConcurrencyCapHolds) {
    SteadyClock clock;
    RateLimiter limiter(1000, 2, clock);
    std::atomic<int> peak{0};
    std::vector<std::thread> threads;
    for (int i = 0; i < 6; ++i) {
        threads.emplace_back([&] {
            auto p = limiter.acquire();
            peak = std::max(peak.load(), limiter.in_flight());
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        });
    }
    for (auto& t : threads) t.join();
    EXPECT_LE(peak.load(), 2);
    EXPECT_EQ(limiter.in_flight(), 0);
}

TEST(RateLimit, GatewayThrottlesPerModel) {
    auto clock = std::make_shared<FakeClock>();
    Gateway gw(std::make_shared<ScriptedProvider>(), fake_clock_options(clock));
    auto cfg = testkit::scripted_config();
    cfg.requests_per_minute = 1;
    gw.send_chat(cfg, {{Role::user, "a"}});
    gw.send_chat(cfg, {{Role::user, "b"}});
    EXPECT_EQ(clock->now().count(), 60000);
}

// ---------------------------------------------------------------------------
// Wire format

namespace {

class RecordingTransport final : public HttpTransport {
public:
    HttpResponse reply;
    std::string last_body;
    std::vector<std::pair<std::string, std::string>> last_headers;

    HttpResponse post(const std::string&, const std::string& body,
                      const std::vector<std::pair<std::string, std::string>>& headers) override {
        last_body = body;
        last_headers = headers;
        return reply;
    }
};

}  // namespace

TEST(Wire, RequestBodyShape) {
    auto cfg = testkit::scripted_config();
    cfg.temperature.reset();
    auto body = nlohmann::json::parse(ChatCompletionsProvider::request_body(cfg, {{{Role::system, "s"}, {Role::user, "u"}}, {}}));
    EXPECT_EQ(body["model"], "scripted-model");
    EXPECT_FALSE(body.contains("temperature"));
    EXPECT_FALSE(body.contains("seed"));
    EXPECT_EQ(body["messages"][0]["role"], "system");
    cfg.temperature = 0.3;
    body = nlohmann::json::parse(ChatCompletionsProvider::request_body(cfg, {{{Role::user, "u"}}, 42}));
    EXPECT_DOUBLE_EQ(body["temperature"].get<double>(), 0.3);
    EXPECT_EQ(body["seed"], 42);
}

TEST(Wire, ParsesReplyAndSendsBearerToken) {
    auto transport = std::make_shared<RecordingTransport>();
    transport->reply = {200, R"({"id":"r1","choices":[{"message":{"content":"hello"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}})", ""};
    ChatCompletionsProvider p(transport, [](const std::string& n) -> std::optional<std::string> {
        if (n == "KEY") return "secret";
        return std::nullopt;
    });
    auto cfg = testkit::scripted_config();
    cfg.auth_ref = "KEY";
    const auto r = p.complete(cfg, {{{Role::user, "u"}}, {}});
    EXPECT_EQ(r.text, "hello");
    EXPECT_EQ(r.request_id, "r1");
    ASSERT_TRUE(r.token_usage);
    EXPECT_EQ(r.token_usage->prompt_tokens, 3);
    ASSERT_EQ(transport->last_headers.size(), 1u);
    EXPECT_EQ(transport->last_headers[0].second, "Bearer secret");
}

TEST(Wire, StatusClassification) {
    auto transport = std::make_shared<RecordingTransport>();
    ChatCompletionsProvider p(transport, [](const std::string&) { return std::optional<std::string>("k"); });
    const auto cfg = testkit::scripted_config();
    const CompletionRequest req{{{Role::user, "u"}}, {}};
    for (int status : {0, 408, 429, 500, 503}) {
        transport->reply = {status, "", "boom"};
        try {
            p.complete(cfg, req);
            FAIL() << status;
        } catch (const ProviderError& e) {
            EXPECT_TRUE(e.transient()) << status;
        }
    }
    transport->reply = {401, "", ""};
    EXPECT_THROW(p.complete(cfg, req), CredentialError);
    transport->reply = {400, "bad", ""};
    try {
        p.complete(cfg, req);
        FAIL();
    } catch (const ProviderError& e) {
        EXPECT_FALSE(e.transient());
    }
    transport->reply = {200, "not json", ""};
    EXPECT_THROW(p.complete(cfg, req), ProviderError);
}

TEST(Wire, MissingCredentialIsReported) {
    auto transport = std::make_shared<RecordingTransport>();
    ChatCompletionsProvider p(transport, [](const std::string&) { return std::optional<std::string>(); });
    auto cfg = testkit::scripted_config();
    cfg.auth_ref = "ABSENT";
    EXPECT_THROW(p.complete(cfg, {{{Role::user, "u"}}, {}}), CredentialError);
}

TEST(Wire, ManifestFormNeverCarriesSecrets) {
    auto cfg = testkit::scripted_config();
    cfg.auth_ref = "LLM_API_KEY";
    const auto j = to_json(cfg);
    EXPECT_EQ(j["auth_ref"], "LLM_API_KEY");
    const auto back = provider_from_json(j);
    EXPECT_EQ(back.model_name, cfg.model_name);
    EXPECT_EQ(back.temperature, cfg.temperature);
}

// ---------------------------------------------------------------------------
// Stub

TEST(Stub, DeterministicAndRuleDriven) {
    StubSettings s;
    s.seed = 11;
    s.rules = default_stub_rules();
    const std::vector<ChatMessage> msgs = {{Role::system, "Decide about homelessness.\n\nmore"},
                                           {Role::user, "The man was sleeping in a shelter."}};
    const auto a = stub_complete(s, msgs, 5);
    const auto b = stub_complete(s, msgs, 5);
    EXPECT_EQ(a.text, b.text);
    EXPECT_EQ(labeling::parse_classification(a.text), LabelOutcome::Positive);
    EXPECT_EQ(stub_rule_outcome(s.rules, "Decide about drug abuse.", "sleeping in a shelter"), LabelOutcome::Negative);
}

TEST(Stub, MalformAlwaysOmitsTheLine) {
    StubSettings s;
    s.seed = 1;
    s.malform = 1.0;
    const auto r = stub_complete(s, {{Role::system, "x"}, {Role::user, "y"}});
    EXPECT_FALSE(labeling::parse_classification(r.text));
}

TEST(Stub, NoiseFlipsAboutTheRequestedShare) {
    StubSettings s;
    s.seed = 3;
    s.noise = 0.3;
    int flipped = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto r = stub_complete(s, {{Role::system, "x"}, {Role::user, "plain report"}}, i);
        flipped += labeling::parse_classification(r.text) != LabelOutcome::Negative;
    }
    EXPECT_NEAR(flipped / 2000.0, 0.3, 0.05);
}

TEST(Stub, ConfigRequiresSeed) {
    ProviderConfig cfg;
    cfg.name = "s";
    cfg.endpoint = "stub";
    cfg.model_name = "m";
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.meta["seed"] = "4";
    EXPECT_NO_THROW(cfg.validate());
    cfg.meta["noise"] = "2";
    EXPECT_THROW(StubSettings::from_config(cfg), ConfigError);
}

TEST(Stub, RoutingKeepsStubOffTheNetwork) {
    const auto before = HttplibTransport::requests_sent();
    Gateway gw(default_provider(), fake_clock_options());
    ProviderConfig cfg;
    cfg.name = "s";
    cfg.endpoint = "stub";
    cfg.model_name = "m";
    cfg.meta["seed"] = "9";
    const auto r = classify_with_retry(gw, cfg, prompt(), "a report about nothing");
    EXPECT_TRUE(r.outcome);
    EXPECT_EQ(HttplibTransport::requests_sent(), before);
}

TEST(Config, ValidateRejectsBadValues) {
    auto cfg = testkit::scripted_config();
    cfg.temperature = -1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = testkit::scripted_config();
    cfg.requests_per_minute = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = testkit::scripted_config();
    cfg.model_name.clear();
    EXPECT_THROW(cfg.validate(), ConfigError);
}
