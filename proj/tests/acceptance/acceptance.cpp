// Acceptance checks. One PASS/FAIL line per criterion; the exit status is
// nonzero when any criterion fails. Tolerances and time budgets are pinned
// below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "scripted.hpp"
#include "vulnlens/analytics.hpp"
#include "vulnlens/biasstats.hpp"
#include "vulnlens/cli.hpp"
#include "vulnlens/codebook.hpp"
#include "vulnlens/corpus.hpp"
#include "vulnlens/counterfactual.hpp"
#include "vulnlens/gateway.hpp"
#include "vulnlens/labeling.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/random.hpp"
#include "workspace.hpp"

using namespace vulnlens;
using labeling::LabelOutcome;
namespace cf = vulnlens::counterfactual;

namespace {

constexpr double kEntropyTol = 1e-12;
constexpr double kHandEntropyTol = 5e-5;  // 1.5710 is given to four decimals
constexpr double kIrlsTol = 1e-3;
constexpr double kQuadratureTol = 1e-3;
constexpr double kAmeTol = 1e-12;
constexpr double kCoverageMin = 0.93;
constexpr double kRecoveryMin = 0.95;

struct Outcome {
    bool pass = true;
    std::vector<std::string> failures;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (ok) return;
        pass = false;
        failures.push_back(what);
    }
};

using Check = std::function<void(Outcome&)>;

bool run_criterion(const std::string& id, const std::string& name, double budget_s, const Check& check) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        check(o);
    } catch (const std::exception& e) {
        o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(secs < budget_s, "over time budget");
    std::string failed;
    for (const auto& f : o.failures) failed += (failed.empty() ? " | failed: " : "; ") + f;
    std::printf("%s criterion %s: %s (%.2fs of %.0fs) %s%s\n", o.pass ? "PASS" : "FAIL", id.c_str(), name.c_str(), secs,
                budget_s, o.detail.str().c_str(), failed.c_str());
    std::fflush(stdout);
    return o.pass;
}

// ---------------------------------------------------------------------------

void cleaning(Outcome& o) {
    const auto rows = util::read_jsonl(testkit::test_file("golden/cleaning.jsonl"));
    o.require(rows.size() == 50, "golden has " + std::to_string(rows.size()) + " cases");
    int bad = 0;
    for (const auto& row : rows)
        if (corpus::clean_text(row["raw"].get<std::string>()) != row["clean"].get<std::string>()) ++bad;
    o.require(bad == 0, std::to_string(bad) + " golden mismatches");
    o.detail << "50 golden cases";
}

void corpus_rules(Outcome& o) {
    const auto in = corpus::ingest_raw(testkit::test_file("fixtures/corpus_rules.csv").string(), "text");
    const auto c = corpus::build_corpus(in.records);
    // Hand count of the fixture: 4 kept, 5 under 200 characters, 2 duplicates, 1 blank row.
    o.require(in.skipped_blank == 1, "blank rows");
    o.require(c.stats.kept == 4, "kept");
    o.require(c.stats.dropped_short == 5, "short");
    o.require(c.stats.dropped_duplicate == 2, "duplicates");
    for (const auto& n : c.narratives) o.require(n.char_count >= corpus::kMinNarrativeChars, "short text kept");
    std::set<std::string> ids;
    for (const auto& n : c.narratives) ids.insert(n.id);
    o.require(ids.size() == c.narratives.size(), "duplicate kept");
    o.detail << "kept " << c.stats.kept << ", short " << c.stats.dropped_short << ", duplicate "
             << c.stats.dropped_duplicate;
}

void prompt_goldens(Outcome& o) {
    const auto cb = codebook::load_codebook(cli::default_data_dir() / "codebook.yaml");
    int n = 0;
    for (auto v : codebook::kAllVulnerabilities) {
        for (auto s : {codebook::PromptStrategy::codebook, codebook::PromptStrategy::custom}) {
            const std::string file =
                "golden/prompts/" + std::string(codebook::to_string(s)) + "_" + std::string(codebook::to_string(v)) + ".txt";
            o.require(codebook::render_prompt(cb.at(v), s).instruction_text == testkit::read_text(testkit::test_file(file)),
                      file);
            ++n;
        }
    }
    o.require(codebook::reformat_message() == testkit::read_text(testkit::test_file("golden/prompts/reformat.txt")),
              "reformat message");
    o.detail << n << " prompts plus the reformat message";
}

void retry_protocol(Outcome& o) {
    const std::string bad = "I cannot tell.";
    const codebook::RenderedPrompt prompt{"Decide.\n\nClassification: [POSITIVE, INCONCLUSIVE, NEGATIVE]"};
    gateway::GatewayOptions opt;
    opt.clock = std::make_shared<gateway::FakeClock>();
    for (int failures = 0; failures <= 3; ++failures) {
        std::vector<testkit::Step> script(failures, bad);
        script.push_back(std::string("Classification: INCONCLUSIVE"));
        auto p = std::make_shared<testkit::ScriptedProvider>(script);
        gateway::Gateway gw(p, opt);
        const auto r = gateway::classify_with_retry(gw, testkit::scripted_config(), prompt, "text");
        o.require(r.outcome == LabelOutcome::Inconclusive, "outcome after " + std::to_string(failures));
        o.require(r.retries_used == failures, "retries_used " + std::to_string(failures));
        o.require(p->requests().size() <= 4 && static_cast<int>(p->requests().size()) == failures + 1, "call count");
    }
    auto p = std::make_shared<testkit::ScriptedProvider>(std::vector<testkit::Step>{}, bad);
    gateway::Gateway gw(p, opt);
    const auto r = gateway::classify_with_retry(gw, testkit::scripted_config(), prompt, "text");
    o.require(!r.outcome, "Missing after three reformat failures");
    o.require(p->requests().size() == 4, "at most four calls");
    o.detail << "retries 0..3 and Missing, max " << p->requests().size() << " calls";
}

void consensus_exhaustive(Outcome& o) {
    int cases = 0, ties = 0;
    for (int n = 0; n <= 10; ++n) {
        for (int i = 0; n + i <= 10; ++i) {
            labeling::VoteDistribution v;
            v.counts = {n, i, 10 - n - i};
            const auto got = labeling::consensus(v);
            const auto want = oracle::consensus(v.counts, 0);
            const bool same = got.outcome == want.outcome && got.agreement_level == want.agreement &&
                              got.unanimous == want.unanimous && got.tie_broken == want.tie;
            o.require(same, std::to_string(n) + "/" + std::to_string(i));
            if (want.tie) {
                ++ties;
                o.require(got.outcome == LabelOutcome::Inconclusive, "tie not Inconclusive");
            }
            ++cases;
        }
    }
    o.require(cases == 66, "multiset count");
    o.detail << cases << " multisets, " << ties << " ties";
}

void metrics_oracles(Outcome& o) {
    using namespace analytics;
    auto L = [](int i) { return static_cast<LabelOutcome>(i); };
    util::Rng rng(6);
    double worst_entropy = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::pair<int, int>> raw(1 + rng.index(60));
        std::vector<OrdinalPair> pairs;
        for (auto& p : raw) {
            p = {static_cast<int>(rng.index(3)), static_cast<int>(rng.index(3))};
            pairs.push_back({L(p.first), L(p.second)});
        }
        o.require(ordinal_mse(pairs) == oracle::mse(raw), "mse");
        const auto cm = confusion_matrix(pairs);
        o.require(cm.cells == oracle::confusion(raw), "confusion");
        const auto prf = precision_recall_f1(cm.binary());
        const auto want = oracle::prf(raw);
        o.require(std::abs(prf.precision - want[0]) < 1e-12 && std::abs(prf.recall - want[1]) < 1e-12 &&
                      std::abs(prf.f1 - want[2]) < 1e-12,
                  "prf");
        labeling::VoteDistribution v;
        const int k = 1 + static_cast<int>(rng.index(15));
        for (int i = 0; i < k; ++i) ++v.counts[rng.index(3)];
        worst_entropy = std::max(worst_entropy, std::abs(vote_entropy(v) - oracle::entropy_bits(v.counts)));
    }
    o.require(worst_entropy <= kEntropyTol, "entropy");
    o.require(ordinal_mse({{L(0), L(1)}, {L(1), L(0)}, {L(2), L(2)}, {L(0), L(0)}}) == 0.5, "hand MSE");
    o.require(std::abs(precision_recall_f1({1, 1, 0, 3}).f1 - 2.0 / 3.0) < 1e-15, "hand F1");
    labeling::VoteDistribution v;
    v.counts = {4, 3, 3};
    o.require(std::abs(vote_entropy(v) - 1.5710) < kHandEntropyTol, "hand entropy");
    o.detail << "1000 fixtures, max entropy error " << worst_entropy;
}

void bootstrap(Outcome& o) {
    util::Rng data(99);
    std::vector<double> xs(300);
    for (auto& x : xs) x = data.uniform() * 1.5;
    const auto a = analytics::bootstrap_mean_ci(xs, 10000, 2024);
    const auto b = analytics::bootstrap_mean_ci(xs, 10000, 2024);
    o.require(std::memcmp(&a.ci_low, &b.ci_low, sizeof(double)) == 0 &&
                  std::memcmp(&a.ci_high, &b.ci_high, sizeof(double)) == 0,
              "bounds not bit-identical");

    // Coverage of the true mean of Normal(1, 0.5) by the 95% interval.
    int covered = 0;
    const int reps = 200;
    for (int r = 0; r < reps; ++r) {
        util::Rng rng(1000 + r);
        std::vector<double> sample(200);
        for (auto& x : sample) x = 1.0 + 0.5 * rng.normal();
        const auto ci = analytics::bootstrap_mean_ci(sample, 10000, 5000 + r);
        if (ci.ci_low <= 1.0 && 1.0 <= ci.ci_high) ++covered;
    }
    const double coverage = static_cast<double>(covered) / reps;
    o.require(coverage >= kCoverageMin, "coverage");
    o.detail << "coverage " << coverage << " over " << reps << " replications";
}

void tables(Outcome& o) {
    analytics::RunView cell;
    cell.config_id = "m__custom__homelessness__k10";
    cell.vulnerability = codebook::VulnerabilityId::homelessness;
    cell.k = 10;
    for (int i = 0; i < 500; ++i) {
        std::array<int, 3> c;
        if (i < 400) c = {10, 0, 0};
        else if (i < 471) c = {7, 2, 1};
        else if (i < 490) c = {1, 1, 8};
        else c = {3, 5, 2};
        cell.summaries.push_back(synth::summary("n" + std::to_string(i), c, 0));
    }
    std::vector<analytics::RunView> views{cell};
    util::Rng rng(8);
    for (int j = 0; j < 5; ++j) {
        analytics::RunView other = cell;
        other.config_id = "m__custom__c" + std::to_string(j) + "__k10";
        other.summaries.clear();
        for (int i = 0; i < 80; ++i) {
            labeling::VoteDistribution v;
            for (int t = 0; t < 10; ++t) ++v.counts[rng.uniform() < 0.8 ? 0 : rng.index(3)];
            other.summaries.push_back(synth::summary("x" + std::to_string(i), v.counts, 0));
        }
        views.push_back(other);
    }
    const auto rows = analytics::distribution_report(views);
    o.require(std::abs(rows.at(0).label_share_pct[0] - 94.2) < 1e-9, "negative share");
    const auto table = analytics::format_distribution_table(rows);
    o.require(table.find("94.2") != std::string::npos, "table does not print 94.2");
    for (const auto& r : rows) o.require(r.unanimous_negative_pct <= r.label_share_pct[0] + 1e-12, "unanimity above negative share");
    o.detail << "negative " << rows[0].label_share_pct[0] << "%, unanimous " << rows[0].unanimous_negative_pct << "%";
}

void variants(Outcome& o) {
    gateway::GatewayOptions opt;
    opt.clock = std::make_shared<gateway::FakeClock>();
    gateway::Gateway gw(std::make_shared<cf::StubRewriter>(), opt);
    auto cfg = testkit::scripted_config("rewriter");
    cfg.temperature = 0;
    const char* races[] = {"black", "white", "hispanic", "asian"};
    std::size_t total = 0;
    int identity_ok = 0;
    for (int b = 0; b < 100; ++b) {
        const std::string race = races[b % 4], sex = b % 2 ? "woman" : "man";
        const auto base = corpus::make_narrative(synth::narrative(b, race, sex, "calm"));
        const cf::SubjectAnnotation ann{base.id, b % 2 ? cf::Sex::female : cf::Sex::male, *cf::parse_race(race), std::nullopt};
        const auto res = cf::generate_variants(base, ann, gw, cfg, 11);
        o.require(res.variants.size() == 15 && res.failed.empty(), "base " + std::to_string(b));
        total += res.variants.size();
        for (const auto& v : res.variants)
            if (v.sex == ann.sex && v.race == ann.race && v.text == base.clean_text) ++identity_ok;
    }
    o.require(total == 1500, "variant count");
    o.require(identity_ok == 100, "identity cells");
    o.detail << total << " variants, " << identity_ok << " identity cells byte-identical";
}

biasstats::Beta beta_of(double b0, double male) {
    biasstats::Beta b = biasstats::Beta::Zero();
    b[0] = b0;
    b[6] = male;
    return b;
}

void glmm(Outcome& o) {
    using namespace biasstats;
    // (a) no group variation: the mixed model at sigma = 0 against the
    // independent IRLS oracle. The free-sigma gap is reported, not gated;
    // sigma-hat lands above zero in many replicates by sampling alone.
    double worst_a = 0, free_gap = 0;
    GlmmOptions at_zero;
    at_zero.sigma_fixed_zero = true;
    for (int r = 0; r < 5; ++r) {
        const auto d = synth::simulate_glmm(beta_of(-1, 0.5), 0.0, 100, 15, 300 + r);
        const auto fixed = fit_glmm(d, at_zero);
        const auto free = fit_glmm(d);
        const auto ref = oracle::irls(d);
        o.require(fixed.converged, "(a) fit did not converge");
        for (int j = 0; j < kNumBeta; ++j) {
            worst_a = std::max(worst_a, std::abs(fixed.beta[j] - ref[j]));
            free_gap = std::max(free_gap, std::abs(free.beta[j] - ref[j]));
        }
    }
    o.require(worst_a <= kIrlsTol, "(a) pooled recovery");

    // (b) Laplace against 60-node adaptive Gauss-Hermite on small instances.
    util::Rng rng(404);
    double worst_b = 0;
    int within_b = 0;
    for (int inst = 0; inst < 20; ++inst) {
        Beta beta = Beta::Zero();
        for (int j = 0; j < kNumBeta; ++j) beta[j] = rng.uniform() * 2 - 1;
        const double sigma = 0.3 + 1.5 * rng.uniform();
        const auto d = synth::simulate_glmm(beta, sigma, 3 + static_cast<int>(rng.index(6)),
                                            3 + static_cast<int>(rng.index(10)), 700 + inst);
        const double lap = laplace_objective(d, beta, sigma).loglik;
        const double gap = std::abs(lap - oracle::total_loglik_quadrature(d, beta, sigma, 60));
        worst_b = std::max(worst_b, gap);
        within_b += gap <= kQuadratureTol;
    }
    o.require(worst_b <= kQuadratureTol, "(b) Laplace vs quadrature");

    // (c) parameter recovery.
    const int reps = 100;
    int ok_b0 = 0, ok_male = 0, ok_sigma = 0, converged = 0;
    for (int r = 0; r < reps; ++r) {
        const auto d = synth::simulate_glmm(beta_of(-1, 0.5), 1.0, 200, 15, 10000 + r);
        const auto fit = fit_glmm(d);
        if (!fit.converged) continue;
        ++converged;
        if (std::abs(fit.beta[0] + 1) < 3 * std::sqrt(fit.vcov(0, 0))) ++ok_b0;
        if (std::abs(fit.beta[6] - 0.5) < 3 * std::sqrt(fit.vcov(6, 6))) ++ok_male;
        const double s = std::abs(fit.sigma);
        const double se_sigma = s * std::sqrt(fit.vcov(kNumBeta, kNumBeta));  // delta method from log sigma
        if (std::abs(s - 1.0) < 3 * se_sigma) ++ok_sigma;
    }
    const double need = kRecoveryMin * reps;
    o.require(ok_b0 >= need && ok_male >= need && ok_sigma >= need, "(c) recovery");
    o.detail << "(a) max |diff| " << worst_a << " (free sigma " << free_gap << "); (b) max |diff| " << worst_b << ", " << within_b << "/20 within tolerance; (c) within 3 SE: b0 " << ok_b0
             << ", male " << ok_male << ", sigma " << ok_sigma << " of " << reps << " (" << converged << " converged)";
}

void ame_and_holm(Outcome& o) {
    using namespace biasstats;
    DesignMatrix d;
    d.group_ids = {"a", "b"};
    for (int i = 0; i < 20; ++i) d.add(i % 2, cf::kAllRaces[i % 5], cf::kAllSexes[i % 3], i % 2);
    GlmmFit closed;
    closed.beta = Beta::Zero();
    closed.beta[6] = std::log(3.0);  // p(male) = 3/4 against p(ref) = 1/2
    closed.converged = true;
    closed.vcov = Eigen::MatrixXd::Identity(kNumBeta + 1, kNumBeta + 1);
    const double male = average_marginal_effects(closed, d).at(5).ame;
    o.require(std::abs(male - 0.25) <= kAmeTol, "closed-form AME");

    util::Rng rng(11);
    int agree = 0, total = 0;
    for (int f = 0; f < 100; ++f) {
        Beta truth = Beta::Zero();
        for (int j = 0; j < kNumBeta; ++j) truth[j] = rng.uniform() * 2 - 1;
        const auto data = synth::simulate_glmm(truth, 0.5, 30, 10, 900 + f);
        const auto fit = fit_glmm(data);
        if (!fit.converged) continue;
        const auto eff = average_marginal_effects(fit, data);
        for (std::size_t e = 0; e < eff.size(); ++e) {
            ++total;
            const double b = fit.beta[static_cast<int>(e) + 1];
            if ((eff[e].ame > 0) == (b > 0) && (eff[e].ame < 0) == (b < 0)) ++agree;
        }
    }
    o.require(total >= 500 && agree == total, "AME sign");

    const auto adj = holm_adjust({0.01, 0.04, 0.03});
    o.require(adj == std::vector<double>{0.03, 0.06, 0.06}, "Holm example");
    o.detail << "AME " << male << "; sign agreement " << agree << "/" << total << "; Holm (" << adj[0] << ", " << adj[1]
             << ", " << adj[2] << ")";
}

void end_to_end(Outcome& o) {
    testkit::TempDir dir("accept-e2e");
    const auto csv = dir / "corpus.csv";
    testkit::write_text(csv, synth::corpus_csv(60));
    const auto work = dir / "work";
    testkit::write_text(dir / "cfg.yaml", testkit::pipeline_config(csv, work));
    const std::string cfg = (dir / "cfg.yaml").string();

    auto run_once = [&](int pass) {
        std::filesystem::remove_all(work);
        auto step = [&](const std::string& cmd) {
            const auto r = testkit::run_cli({"--config", cfg, "--stub", cmd});
            o.require(r.code == 0, "run " + std::to_string(pass) + " " + cmd + " exit " + std::to_string(r.code) + " " + r.err);
        };
        for (const char* cmd : {"ingest", "clean", "label", "consensus", "sample"}) step(cmd);
        testkit::write_human_labels(work);
        for (const char* cmd : {"metrics", "curves", "cf-select"}) step(cmd);
        testkit::fill_worksheet_from_text(work);
        for (const char* cmd : {"cf-generate", "cf-label", "bias-report"}) step(cmd);
        return testkit::snapshot(work);
    };

    const auto before = gateway::HttplibTransport::requests_sent();
    const auto first = run_once(1);
    const auto second = run_once(2);
    const auto network = gateway::HttplibTransport::requests_sent() - before;

    o.require(network == 0, "network calls");
    std::vector<std::string> differing;
    for (const auto& [path, bytes] : first) {
        auto it = second.find(path);
        if (it == second.end() || it->second != bytes) differing.push_back(path);
    }
    o.require(first.size() == second.size() && differing.empty(),
              "outputs differ between runs" + (differing.empty() ? std::string() : " (first: " + differing.front() + ")"));
    for (const char* f : {"reports/metrics.json", "reports/curves.json", "counterfactual/variants.jsonl", "bias/effects.json"})
        o.require(first.count(f) == 1, std::string("missing ") + f);
    o.detail << first.size() << " files identical across two runs, " << network << " network calls";
}

}  // namespace

int main() {
    struct Entry {
        const char* id;
        const char* name;
        double budget_s;
        Check check;
    };
    const std::vector<Entry> criteria = {
        {"1", "cleaning golden", 1, cleaning},
        {"2", "corpus length and duplicate rules", 1, corpus_rules},
        {"3", "prompt goldens", 1, prompt_goldens},
        {"4", "reformat retry protocol", 1, retry_protocol},
        {"5", "consensus over all 66 vote multisets", 1, consensus_exhaustive},
        {"6", "metric oracles", 5, metrics_oracles},
        {"7", "bootstrap reproducibility and coverage", 60, bootstrap},
        {"8", "distribution table reconstruction", 5, tables},
        {"9", "counterfactual grid", 10, variants},
        {"10", "mixed-model fitting", 300, glmm},
        {"11", "marginal effects and Holm", 5, ame_and_holm},
        {"12", "end-to-end stub run", 120, end_to_end},
    };
    int failed = 0;
    for (const auto& c : criteria)
        if (!run_criterion(c.id, c.name, c.budget_s, c.check)) ++failed;
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
