#include <gtest/gtest.h>

#include <chrono>

#include "oracles.hpp"
#include "scripted.hpp"
#include "vulnlens/error.hpp"
#include "vulnlens/labeling.hpp"
#include "vulnlens/util/clock.hpp"
#include "vulnlens/util/files.hpp"
#include "workspace.hpp"

using namespace vulnlens;
using namespace vulnlens::labeling;
using codebook::VulnerabilityId;

namespace {

gateway::ProviderConfig stub(std::uint64_t seed = 5, double noise = 0.2, double malform = 0.0) {
    gateway::ProviderConfig p;
    p.name = "stub";
    p.endpoint = "stub";
    p.model_name = "stub-model";
    p.temperature = 0.7;
    p.meta = {{"seed", std::to_string(seed)}, {"noise", std::to_string(noise)}, {"malform", std::to_string(malform)}};
    return p;
}

std::vector<LabelTarget> targets(int n) {
    std::vector<LabelTarget> out;
    for (int i = 0; i < n; ++i) {
        out.push_back({"n" + std::to_string(i), i % 2 ? "Found asleep in a doorway." : "Spoke politely with officers."});
    }
    return out;
}

const codebook::RenderedPrompt kPrompt{"Decide about homelessness in the report.\n\nClassification: [POSITIVE, INCONCLUSIVE, NEGATIVE]"};

const util::FixedClock kClock(std::chrono::system_clock::time_point(std::chrono::seconds(1704067200)));

RunOptions fixed() {
    RunOptions o;
    o.clock = &kClock;
    o.code_version = "test";
    return o;
}

gateway::GatewayOptions fake() {
    gateway::GatewayOptions o;
    o.clock = std::make_shared<gateway::FakeClock>();
    return o;
}

/// Throws a non-provider error once `limit` calls have been served.
class Interrupting final : public gateway::ChatProvider {
public:
    explicit Interrupting(int limit) : limit_(limit) {}
    gateway::CompletionResult complete(const gateway::ProviderConfig& cfg,
                                       const gateway::CompletionRequest& req) override {
        if (calls_++ >= limit_) throw std::runtime_error("interrupted");
        return gateway::StubProvider().complete(cfg, req);
    }

private:
    int limit_;
    std::atomic<int> calls_{0};
};

LabelRecord rec(const std::string& id, int it, std::optional<LabelOutcome> o) {
    LabelRecord r;
    r.narrative_id = id;
    r.config_id = "c";
    r.iteration = it;
    r.outcome = o;
    r.missing = o ? MissingReason::none : MissingReason::parse_failure;
    return r;
}

}  // namespace

TEST(ConfigId, DerivedAndPathSafe) {
    EXPECT_EQ(LabelingConfig::derive_id("llama-3-8b", PromptStrategy::custom, VulnerabilityId::homelessness, 10),
              "llama-3-8b__custom__homelessness__k10");
    const auto id = LabelingConfig::derive_id("org/Model v2:latest", PromptStrategy::codebook,
                                              VulnerabilityId::substance_misuse, 5);
    EXPECT_EQ(id.find('/'), std::string::npos);
    EXPECT_EQ(id.find(' '), std::string::npos);
    EXPECT_EQ(id.find(':'), std::string::npos);
}

TEST(RequestSeed, VariesByIterationAndNarrative) {
    const auto cfg = make_config(stub(), PromptStrategy::custom, VulnerabilityId::homelessness, 10, 1);
    EXPECT_NE(request_seed(cfg, "a", 0), request_seed(cfg, "a", 1));
    EXPECT_NE(request_seed(cfg, "a", 0), request_seed(cfg, "b", 0));
    EXPECT_EQ(request_seed(cfg, "a", 3), request_seed(cfg, "a", 3));
}

TEST(RunLabeling, ProducesKRecordsPerTarget) {
    testkit::TempDir dir;
    gateway::Gateway gw(gateway::default_provider(), fake());
    const auto cfg = make_config(stub(), PromptStrategy::custom, VulnerabilityId::homelessness, 10);
    const auto report = run_labeling(targets(6), cfg, kPrompt, gw, dir.path(), fixed());
    EXPECT_EQ(report.new_requests, 60u);
    EXPECT_EQ(report.total_records, 60u);
    EXPECT_LE(report.completion_calls, 240u);
    const auto run = load_run(run_dir(dir.path(), cfg.config_id));
    EXPECT_EQ(run.records.size(), 60u);
    EXPECT_EQ(run.config.k, 10);
    EXPECT_EQ(run.manifest["config_id"], cfg.config_id);
    const auto summaries = summarize_run(run);
    ASSERT_EQ(summaries.size(), 6u);
    EXPECT_EQ(summaries[1].votes.k(), 10);
}

TEST(RunLabeling, ByteIdenticalAcrossRepeats) {
    testkit::TempDir a, b;
    for (auto* d : {&a, &b}) {
        gateway::Gateway gw(gateway::default_provider(), fake());
        const auto cfg = make_config(stub(5, 0.3, 0.2), PromptStrategy::custom, VulnerabilityId::homelessness, 10);
        run_labeling(targets(8), cfg, kPrompt, gw, d->path(), fixed());
    }
    EXPECT_EQ(testkit::snapshot(a.path()), testkit::snapshot(b.path()));
}

TEST(RunLabeling, ResumeAfterInterruptionMatchesUninterruptedRun) {
    testkit::TempDir whole, split;
    const auto cfg = make_config(stub(), PromptStrategy::custom, VulnerabilityId::homelessness, 10);
    auto opts = fixed();
    opts.concurrency = 1;
    {
        gateway::Gateway gw(gateway::default_provider(), fake());
        run_labeling(targets(5), cfg, kPrompt, gw, whole.path(), opts);
    }
    {
        gateway::Gateway gw(std::make_shared<Interrupting>(17), fake());
        EXPECT_THROW(run_labeling(targets(5), cfg, kPrompt, gw, split.path(), opts), std::runtime_error);
    }
    const auto partial = util::read_jsonl(run_dir(split.path(), cfg.config_id) / "records.jsonl").size();
    EXPECT_GT(partial, 0u);
    EXPECT_LT(partial, 50u);
    gateway::Gateway gw(gateway::default_provider(), fake());
    const auto report = run_labeling(targets(5), cfg, kPrompt, gw, split.path(), opts);
    EXPECT_EQ(report.already_present, partial);
    EXPECT_EQ(report.new_requests, 50u - partial);
    EXPECT_EQ(testkit::snapshot(whole.path()), testkit::snapshot(split.path()));
}

TEST(RunLabeling, CompletedRunIssuesNoRequests) {
    testkit::TempDir dir;
    const auto cfg = make_config(stub(), PromptStrategy::custom, VulnerabilityId::homelessness, 3);
    gateway::Gateway gw(gateway::default_provider(), fake());
    run_labeling(targets(4), cfg, kPrompt, gw, dir.path(), fixed());
    const auto calls = gw.calls_issued();
    const auto again = run_labeling(targets(4), cfg, kPrompt, gw, dir.path(), fixed());
    EXPECT_EQ(again.new_requests, 0u);
    EXPECT_EQ(gw.calls_issued(), calls);
}

TEST(RunLabeling, ChangedPromptIsNotResumable) {
    testkit::TempDir dir;
    const auto cfg = make_config(stub(), PromptStrategy::custom, VulnerabilityId::homelessness, 3);
    gateway::Gateway gw(gateway::default_provider(), fake());
    run_labeling(targets(2), cfg, kPrompt, gw, dir.path(), fixed());
    codebook::RenderedPrompt other{kPrompt.instruction_text + " changed"};
    EXPECT_THROW(run_labeling(targets(2), cfg, other, gw, dir.path(), fixed()), PreconditionError);
}

TEST(RunLabeling, TransportFailuresBecomeMissing) {
    testkit::TempDir dir;
    auto provider = std::make_shared<testkit::ScriptedProvider>(std::vector<testkit::Step>(200, testkit::Permanent{400}));
    gateway::Gateway gw(provider, fake());
    const auto cfg = make_config(testkit::scripted_config(), PromptStrategy::custom, VulnerabilityId::homelessness, 2);
    const auto report = run_labeling(targets(3), cfg, kPrompt, gw, dir.path(), fixed());
    EXPECT_EQ(report.transport_missing, 6u);
    const auto run = load_run(run_dir(dir.path(), cfg.config_id));
    for (const auto& r : run.records) {
        EXPECT_FALSE(r.outcome);
        EXPECT_EQ(r.missing, MissingReason::transport_failure);
    }
}

TEST(RunLabeling, ParseFailuresAreMissingWithThreeRetries) {
    testkit::TempDir dir;
    gateway::Gateway gw(gateway::default_provider(), fake());
    const auto cfg = make_config(stub(1, 0.0, 1.0), PromptStrategy::custom, VulnerabilityId::homelessness, 2);
    const auto report = run_labeling(targets(2), cfg, kPrompt, gw, dir.path(), fixed());
    EXPECT_EQ(report.parse_missing, 4u);
    EXPECT_EQ(report.completion_calls, 16u);
    for (const auto& r : load_run(run_dir(dir.path(), cfg.config_id)).records) EXPECT_EQ(r.retries_used, 3);
}

TEST(Records, JsonRoundTrip) {
    auto r = rec("n1", 4, LabelOutcome::Positive);
    r.notes_text = "because";
    r.retries_used = 2;
    r.timestamp = "2024-01-01T00:00:00Z";
    const auto back = record_from_json(to_json(r));
    EXPECT_EQ(back.narrative_id, "n1");
    EXPECT_EQ(back.outcome, LabelOutcome::Positive);
    EXPECT_EQ(back.retries_used, 2);
    const auto missing = record_from_json(to_json(rec("n2", 0, std::nullopt)));
    EXPECT_FALSE(missing.outcome);
    EXPECT_EQ(missing.missing, MissingReason::parse_failure);
}

TEST(Tally, RequiresEveryIterationOnce) {
    std::vector<LabelRecord> rs;
    for (int i = 0; i < 3; ++i) rs.push_back(rec("a", i, LabelOutcome::Negative));
    EXPECT_EQ(tally_votes(rs, 3).count(LabelOutcome::Negative), 3);
    EXPECT_THROW(tally_votes(rs, 4), IntegrityError);
    rs[2].iteration = 1;
    EXPECT_THROW(tally_votes(rs, 3), IntegrityError);
}

TEST(Tally, CountsMissingSeparately) {
    std::vector<LabelRecord> rs = {rec("a", 0, LabelOutcome::Positive), rec("a", 1, std::nullopt),
                                   rec("a", 2, LabelOutcome::Positive)};
    const auto v = tally_votes(rs, 3);
    EXPECT_EQ(v.n_missing, 1);
    EXPECT_EQ(v.n_valid(), 2);
    const auto c = consensus(v);
    EXPECT_EQ(c.outcome, LabelOutcome::Positive);
    EXPECT_FALSE(c.unanimous);
}

TEST(Consensus, ExhaustiveAgainstOracleForK10) {
    int cases = 0;
    for (int n = 0; n <= 10; ++n) {
        for (int i = 0; n + i <= 10; ++i) {
            const int p = 10 - n - i;
            VoteDistribution v;
            v.counts = {n, i, p};
            const auto got = consensus(v);
            const auto want = oracle::consensus(v.counts, 0);
            EXPECT_EQ(got.outcome, want.outcome) << n << "," << i << "," << p;
            EXPECT_EQ(got.agreement_level, want.agreement);
            EXPECT_EQ(got.unanimous, want.unanimous);
            EXPECT_EQ(got.tie_broken, want.tie);
            ++cases;
        }
    }
    EXPECT_EQ(cases, 66);
}

TEST(Consensus, TieBecomesInconclusive) {
    VoteDistribution v;
    v.counts = {5, 0, 5};
    const auto c = consensus(v);
    EXPECT_EQ(c.outcome, LabelOutcome::Inconclusive);
    EXPECT_TRUE(c.tie_broken);
    v.counts = {0, 0, 0};
    v.n_missing = 10;
    EXPECT_TRUE(consensus(v).tie_broken);
}

TEST(Consensus, StrictMajorityNeedsMoreThanHalf) {
    VoteDistribution v;
    v.counts = {4, 3, 3};
    EXPECT_EQ(consensus(v, ConsensusRule::plurality).outcome, LabelOutcome::Negative);
    const auto strict = consensus(v, ConsensusRule::strict_majority);
    EXPECT_EQ(strict.outcome, LabelOutcome::Inconclusive);
    EXPECT_TRUE(strict.tie_broken);
    v.counts = {6, 2, 2};
    EXPECT_EQ(consensus(v, ConsensusRule::strict_majority).outcome, LabelOutcome::Negative);
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

ReferenceLabels reference(int neg, int inc, int pos) {
    ReferenceLabels ref;
    int id = 0;
    for (auto [label, count] : {std::pair{LabelOutcome::Negative, neg}, {LabelOutcome::Inconclusive, inc},
                                {LabelOutcome::Positive, pos}}) {
        for (int i = 0; i < count; ++i) {
            std::map<VulnerabilityId, LabelOutcome> m;
            for (auto v : codebook::kAllVulnerabilities) m[v] = label;
            ref.emplace_back("r" + std::to_string(id++), m);
        }
    }
    return ref;
}

}  // namespace

TEST(Sampling, RealizesTargetsAndIsSeeded) {
    const auto ref = reference(150, 80, 70);
    const auto s1 = sample_evaluation_set(ref, {}, 99);
    const auto s2 = sample_evaluation_set(ref, {}, 99);
    EXPECT_EQ(s1.narrative_ids, s2.narrative_ids);
    ASSERT_EQ(s1.strata.size(), 12u);
    for (const auto& st : s1.strata) {
        const int want = st.label == LabelOutcome::Negative ? 100 : 50;
        EXPECT_EQ(static_cast<int>(st.narrative_ids.size()), want);
        EXPECT_EQ(st.target, want);
    }
    EXPECT_NE(sample_evaluation_set(ref, {}, 100).narrative_ids, s1.narrative_ids);
}

TEST(Sampling, PositiveShortfallMovesToInconclusive) {
    const auto s = sample_evaluation_set(reference(120, 80, 30), {}, 1);
    for (const auto& st : s.strata) {
        if (st.label == LabelOutcome::Positive) EXPECT_EQ(st.narrative_ids.size(), 30u);
        if (st.label == LabelOutcome::Inconclusive) EXPECT_EQ(st.narrative_ids.size(), 70u);
    }
}

TEST(Sampling, ShortStrataAreSamplingErrors) {
    EXPECT_THROW(sample_evaluation_set(reference(99, 80, 70), {}, 1), SamplingError);
    EXPECT_THROW(sample_evaluation_set(reference(120, 60, 30), {}, 1), SamplingError);
    EXPECT_THROW(sample_evaluation_set({}, {}, 1), PreconditionError);
}

// ---------------------------------------------------------------------------
// Human labels

namespace {

HumanLabel human(const std::string& coder, LabelOutcome o, CoderRole role = CoderRole::coder,
                 std::optional<std::string> key = std::nullopt) {
    HumanLabel l;
    l.narrative_id = "n1";
    l.vulnerability = VulnerabilityId::homelessness;
    l.coder_id = coder;
    l.role = role;
    l.outcome = o;
    l.idempotency_key = key;
    return l;
}

}  // namespace

TEST(HumanLabels, AgreementDecidesWithoutAdjudication) {
    testkit::TempDir dir;
    HumanLabelStore store(dir / "h.jsonl", 2, &kClock);
    EXPECT_EQ(state_name(store.state("n1", VulnerabilityId::homelessness)), "awaiting_coders");
    EXPECT_THROW(store.adjudicate("n1", VulnerabilityId::homelessness), PreconditionError);
    store.record(human("a", LabelOutcome::Positive));
    store.record(human("b", LabelOutcome::Positive));
    const auto d = store.adjudicate("n1", VulnerabilityId::homelessness);
    ASSERT_TRUE(std::holds_alternative<AdjudicatedLabel>(d));
    EXPECT_EQ(std::get<AdjudicatedLabel>(d).source, AdjudicationSource::coder_agreement);
    EXPECT_THROW(store.record(human("c", LabelOutcome::Negative)), ConflictError);
    EXPECT_THROW(store.record(human("z", LabelOutcome::Negative, CoderRole::adjudicator)), ConflictError);
}

TEST(HumanLabels, DisagreementNeedsAdjudicator) {
    testkit::TempDir dir;
    HumanLabelStore store(dir / "h.jsonl", 2, &kClock);
    store.record(human("a", LabelOutcome::Positive));
    EXPECT_THROW(store.record(human("a", LabelOutcome::Negative)), ConflictError);
    store.record(human("b", LabelOutcome::Negative));
    EXPECT_EQ(state_name(store.state("n1", VulnerabilityId::homelessness)), "needs_adjudication");
    EXPECT_TRUE(store.final_labels().empty());
    store.record(human("z", LabelOutcome::Inconclusive, CoderRole::adjudicator));
    const auto finals = store.final_labels();
    ASSERT_EQ(finals.size(), 1u);
    EXPECT_EQ(finals.begin()->second.outcome, LabelOutcome::Inconclusive);
    EXPECT_EQ(finals.begin()->second.source, AdjudicationSource::adjudication);

    HumanLabelStore reopened(dir / "h.jsonl", 2, &kClock);
    EXPECT_EQ(reopened.final_labels().begin()->second.outcome, LabelOutcome::Inconclusive);
    EXPECT_EQ(reopened.all().size(), 3u);
}

TEST(HumanLabels, IdempotentReplayWritesNothing) {
    testkit::TempDir dir;
    HumanLabelStore store(dir / "h.jsonl", 2, &kClock);
    EXPECT_TRUE(store.record(human("a", LabelOutcome::Positive, CoderRole::coder, "k1")));
    EXPECT_FALSE(store.record(human("a", LabelOutcome::Positive, CoderRole::coder, "k1")));
    EXPECT_EQ(util::read_jsonl(dir / "h.jsonl").size(), 1u);
    EXPECT_THROW(store.record(human("a", LabelOutcome::Negative, CoderRole::coder, "k1")), ConflictError);
}

TEST(HumanLabels, RevisionOnlyWhileUndecided) {
    testkit::TempDir dir;
    HumanLabelStore store(dir / "h.jsonl", 2, &kClock);
    EXPECT_THROW(store.revise(human("a", LabelOutcome::Negative)), NotFoundError);
    store.record(human("a", LabelOutcome::Positive));
    store.revise(human("a", LabelOutcome::Negative));
    const auto labels = store.coder_labels("n1", VulnerabilityId::homelessness);
    ASSERT_EQ(labels.size(), 1u);
    EXPECT_EQ(labels[0].outcome, LabelOutcome::Negative);
    store.record(human("b", LabelOutcome::Negative));
    EXPECT_THROW(store.revise(human("a", LabelOutcome::Positive)), ConflictError);
}

TEST(HumanLabels, JsonRoundTrip) {
    auto l = human("a", LabelOutcome::Inconclusive, CoderRole::adjudicator, "key");
    l.note = "close call";
    l.timestamp = "2024-01-01T00:00:00Z";
    const auto back = human_label_from_json(to_json(l));
    EXPECT_EQ(back.role, CoderRole::adjudicator);
    EXPECT_EQ(back.note, "close call");
    EXPECT_EQ(back.idempotency_key, "key");
}
