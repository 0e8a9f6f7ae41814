#include "vulnlens/analytics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "vulnlens/error.hpp"
#include "vulnlens/util/csv.hpp"
#include "vulnlens/util/random.hpp"

namespace vulnlens::analytics {

using labeling::ordinal;
using nlohmann::ordered_json;

double ordinal_mse(const std::vector<OrdinalPair>& pairs) {
    if (pairs.empty()) throw DomainError("ordinal_mse: no label pairs");
    double sum = 0;
    for (const auto& p : pairs) {
        const int d = ordinal(p.human) - ordinal(p.model);
        sum += d * d;
    }
    return sum / static_cast<double>(pairs.size());
}

int binarize(LabelOutcome o) { return o == LabelOutcome::Negative ? 0 : 1; }

PrecisionRecallF1 precision_recall_f1(const BinaryCounts& c) {
    PrecisionRecallF1 r;
    if (c.tp + c.fp > 0) {
        r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    } else {
        r.degenerate = true;
    }
    if (c.tp + c.fn > 0) {
        r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    } else {
        r.degenerate = true;
    }
    if (r.precision + r.recall > 0) {
        r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
    } else {
        r.degenerate = true;
    }
    return r;
}

long ConfusionMatrix3::total() const {
    long t = 0;
    for (const auto& row : cells)
        for (long v : row) t += v;
    return t;
}

long ConfusionMatrix3::row_sum(LabelOutcome human) const {
    long t = 0;
    for (long v : cells[ordinal(human)]) t += v;
    return t;
}

long ConfusionMatrix3::col_sum(LabelOutcome model) const {
    long t = 0;
    for (const auto& row : cells) t += row[ordinal(model)];
    return t;
}

BinaryCounts ConfusionMatrix3::binary() const {
    BinaryCounts b;
    for (auto h : labeling::kAllOutcomes) {
        for (auto m : labeling::kAllOutcomes) {
            const long v = at(h, m);
            const bool ht = binarize(h) == 1, mt = binarize(m) == 1;
            if (ht && mt) b.tp += v;
            else if (!ht && mt) b.fp += v;
            else if (ht && !mt) b.fn += v;
            else b.tn += v;
        }
    }
    return b;
}

ConfusionMatrix3 confusion_matrix(const std::vector<OrdinalPair>& pairs) {
    if (pairs.empty()) throw DomainError("confusion_matrix: no label pairs");
    ConfusionMatrix3 m;
    for (const auto& p : pairs) ++m.cells[ordinal(p.human)][ordinal(p.model)];
    return m;
}

double vote_entropy(const VoteDistribution& votes) {
    const int n = votes.n_valid();
    if (n <= 0) throw DomainError("vote_entropy: no valid votes");
    double h = 0;
    for (int c : votes.counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log2(p);
    }
    return h;
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw DomainError("percentile of an empty sample");
    const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

EntropyStat bootstrap_mean_ci(const std::vector<double>& values, int n_boot, std::uint64_t seed) {
    if (values.empty()) throw DomainError("bootstrap_mean_ci: no values");
    if (n_boot < 1) throw DomainError("bootstrap_mean_ci: n_boot must be positive");
    EntropyStat s;
    s.per_item_entropy = values;
    s.n_boot = n_boot;
    s.seed = seed;
    const std::size_t n = values.size();
    double sum = 0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(n);

    util::Rng rng(seed);
    std::vector<double> means(static_cast<std::size_t>(n_boot));
    for (auto& m : means) {
        double acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += values[rng.index(n)];
        m = acc / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    s.ci_low = percentile_sorted(means, 2.5);
    s.ci_high = percentile_sorted(means, 97.5);
    return s;
}

// ---------------------------------------------------------------------------

RunView view_of(const labeling::Run& run, labeling::ConsensusRule rule) {
    RunView v;
    v.config_id = run.config.config_id;
    v.vulnerability = run.config.vulnerability;
    v.k = run.config.k;
    v.summaries = labeling::summarize_run(run, rule);
    return v;
}

HumanLabels human_labels_from(const labeling::HumanLabelStore& store) {
    HumanLabels out;
    for (const auto& [key, label] : store.final_labels()) out[key] = label.outcome;
    return out;
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ", ";
        out += ids[i];
    }
    return out;
}

std::string vname(VulnerabilityId v) { return std::string(codebook::to_string(v)); }

}  // namespace

EvaluationJoin join_evaluation(const RunView& run, const HumanLabels& human,
                               const std::vector<std::string>& evaluation_ids) {
    std::map<std::string, const labeling::NarrativeSummary*> by_id;
    for (const auto& s : run.summaries) by_id[s.narrative_id] = &s;

    EvaluationJoin j;
    std::vector<std::string> no_human, no_run;
    std::set<std::string> seen;
    for (const auto& id : evaluation_ids) {
        if (!seen.insert(id).second) continue;
        auto h = human.find({id, run.vulnerability});
        auto s = by_id.find(id);
        if (h == human.end()) no_human.push_back(id);
        if (s == by_id.end()) no_run.push_back(id);
        if (h != human.end() && s != by_id.end()) {
            j.items.push_back(s->second);
            j.human.push_back(h->second);
        }
    }
    if (!no_human.empty()) {
        throw IntegrityError("missing human labels for " + vname(run.vulnerability) + ": " + join_ids(no_human));
    }
    if (!no_run.empty()) {
        throw IntegrityError("run " + run.config_id + " has no records for: " + join_ids(no_run));
    }
    return j;
}

AlignmentRow alignment_report(const RunView& run, const HumanLabels& human,
                              const std::vector<std::string>& evaluation_ids) {
    const auto j = join_evaluation(run, human, evaluation_ids);
    std::vector<OrdinalPair> pairs;
    pairs.reserve(j.items.size());
    for (std::size_t i = 0; i < j.items.size(); ++i) pairs.push_back({j.human[i], j.items[i]->consensus.outcome});

    AlignmentRow row;
    row.config_id = run.config_id;
    row.vulnerability = run.vulnerability;
    row.n = static_cast<long>(pairs.size());
    row.mse = ordinal_mse(pairs);
    row.confusion = confusion_matrix(pairs);
    row.prf = precision_recall_f1(row.confusion.binary());
    return row;
}

std::string_view to_string(AgreementStratum s) {
    switch (s) {
        case AgreementStratum::overall: return "overall";
        case AgreementStratum::agree: return "agree";
        case AgreementStratum::disagree: return "disagree";
    }
    return "?";
}

std::vector<EntropyStratumRow> entropy_strata_report(const RunView& run, const HumanLabels& human,
                                                     const std::vector<std::string>& evaluation_ids, int n_boot,
                                                     std::uint64_t seed) {
    const auto j = join_evaluation(run, human, evaluation_ids);

    struct Item {
        double h;
        bool agree;
        LabelOutcome label;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < j.items.size(); ++i) {
        const auto* s = j.items[i];
        if (s->votes.n_valid() == 0) continue;
        items.push_back({vote_entropy(s->votes), s->consensus.outcome == j.human[i], s->consensus.outcome});
    }

    std::vector<EntropyStratumRow> rows;
    const std::array<AgreementStratum, 3> strata = {AgreementStratum::overall, AgreementStratum::agree,
                                                    AgreementStratum::disagree};
    std::vector<std::optional<LabelOutcome>> labels = {std::nullopt};
    for (auto o : labeling::kAllOutcomes) labels.push_back(o);

    for (auto a : strata) {
        for (const auto& lab : labels) {
            std::vector<double> values;
            for (const auto& it : items) {
                if (a == AgreementStratum::agree && !it.agree) continue;
                if (a == AgreementStratum::disagree && it.agree) continue;
                if (lab && it.label != *lab) continue;
                values.push_back(it.h);
            }
            EntropyStratumRow row;
            row.config_id = run.config_id;
            row.vulnerability = run.vulnerability;
            row.agreement = a;
            row.consensus_label = lab;
            row.n = static_cast<long>(values.size());
            if (!values.empty()) {
                const std::string label_tag = lab ? std::string(labeling::to_string(*lab)) : "all";
                const auto s = util::derive_seed(
                    seed, run.config_id + "|" + std::string(to_string(a)) + "|" + label_tag);
                row.stat = bootstrap_mean_ci(values, n_boot, s);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

AgreementCurve agreement_alignment_curve(const RunView& run, const HumanLabels& human,
                                         const std::vector<std::string>& evaluation_ids) {
    const auto j = join_evaluation(run, human, evaluation_ids);
    AgreementCurve c;
    c.config_id = run.config_id;
    c.vulnerability = run.vulnerability;
    c.n = static_cast<long>(j.items.size());

    const int max_level = std::max(run.k, kCurveMinLevel);
    // [level][label] -> (count, matches)
    std::map<std::pair<int, int>, std::pair<long, long>> cells;
    for (std::size_t i = 0; i < j.items.size(); ++i) {
        const auto* s = j.items[i];
        const auto& counts = s->votes.counts;
        const int top = *std::max_element(counts.begin(), counts.end());
        const int n_top = static_cast<int>(std::count(counts.begin(), counts.end(), top));
        if (top < kCurveMinLevel || n_top > 1) {
            ++c.remainder_count;
            continue;
        }
        const int label = static_cast<int>(std::find(counts.begin(), counts.end(), top) - counts.begin());
        auto& cell = cells[{top, label}];
        ++cell.first;
        if (s->consensus.outcome == j.human[i]) ++cell.second;
    }
    const double n = static_cast<double>(c.n);
    for (int level = kCurveMinLevel; level <= max_level; ++level) {
        for (auto o : labeling::kAllOutcomes) {
            AgreementCurvePoint p;
            p.level = level;
            p.label = o;
            auto it = cells.find({level, ordinal(o)});
            if (it != cells.end()) {
                p.count = it->second.first;
                p.alignment = static_cast<double>(it->second.second) / static_cast<double>(it->second.first);
            }
            p.share = c.n > 0 ? static_cast<double>(p.count) / n : 0.0;
            c.points.push_back(p);
        }
    }
    c.remainder_share = c.n > 0 ? static_cast<double>(c.remainder_count) / n : 0.0;
    return c;
}

std::vector<DistributionRow> distribution_report(const std::vector<RunView>& runs) {
    std::vector<DistributionRow> rows;
    for (const auto& run : runs) {
        DistributionRow r;
        r.config_id = run.config_id;
        r.vulnerability = run.vulnerability;
        r.n = static_cast<long>(run.summaries.size());
        std::array<long, 3> counts{};
        long unanimous_neg = 0;
        for (const auto& s : run.summaries) {
            ++counts[ordinal(s.consensus.outcome)];
            if (s.votes.count(LabelOutcome::Negative) == run.k) ++unanimous_neg;
        }
        if (r.n > 0) {
            for (int i = 0; i < 3; ++i) r.label_share_pct[i] = 100.0 * static_cast<double>(counts[i]) / r.n;
            r.unanimous_negative_pct = 100.0 * static_cast<double>(unanimous_neg) / r.n;
        }
        rows.push_back(r);
    }
    return rows;
}

std::string format_distribution_table(const std::vector<DistributionRow>& rows) {
    std::ostringstream out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-40s %-20s %6s %9s %13s %9s %14s\n", "config", "vulnerability", "n",
                  "negative", "inconclusive", "positive", "unanimous_neg");
    out << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-40s %-20s %6ld %9.1f %13.1f %9.1f %14.1f\n", r.config_id.c_str(),
                      vname(r.vulnerability).c_str(), r.n, r.label_share_pct[0], r.label_share_pct[1],
                      r.label_share_pct[2], r.unanimous_negative_pct);
        out << buf;
    }
    return out.str();
}

// ---------------------------------------------------------------------------

std::vector<LongRow> to_long(const std::vector<AlignmentRow>& rows) {
    std::vector<LongRow> out;
    for (const auto& r : rows) {
        const auto v = vname(r.vulnerability);
        auto add = [&](const std::string& stat, double x) { out.push_back({r.config_id, v, stat, x}); };
        add("n", static_cast<double>(r.n));
        add("mse", r.mse);
        add("precision", r.prf.precision);
        add("recall", r.prf.recall);
        add("f1", r.prf.f1);
        add("degenerate", r.prf.degenerate ? 1.0 : 0.0);
        for (auto h : labeling::kAllOutcomes) {
            for (auto m : labeling::kAllOutcomes) {
                add("confusion." + std::string(labeling::to_string(h)) + "." + std::string(labeling::to_string(m)),
                    static_cast<double>(r.confusion.at(h, m)));
            }
        }
    }
    return out;
}

std::vector<LongRow> to_long(const std::vector<EntropyStratumRow>& rows) {
    std::vector<LongRow> out;
    for (const auto& r : rows) {
        const std::string prefix = "entropy." + std::string(to_string(r.agreement)) + "." +
                                   (r.consensus_label ? std::string(labeling::to_string(*r.consensus_label)) : "all");
        const auto v = vname(r.vulnerability);
        out.push_back({r.config_id, v, prefix + ".n", static_cast<double>(r.n)});
        out.push_back({r.config_id, v, prefix + ".mean", r.stat ? std::optional<double>(r.stat->mean) : std::nullopt});
        out.push_back(
            {r.config_id, v, prefix + ".ci_low", r.stat ? std::optional<double>(r.stat->ci_low) : std::nullopt});
        out.push_back(
            {r.config_id, v, prefix + ".ci_high", r.stat ? std::optional<double>(r.stat->ci_high) : std::nullopt});
    }
    return out;
}

std::vector<LongRow> to_long(const std::vector<AgreementCurve>& curves) {
    std::vector<LongRow> out;
    for (const auto& c : curves) {
        const auto v = vname(c.vulnerability);
        for (const auto& p : c.points) {
            const std::string prefix =
                "curve." + std::to_string(p.level) + "." + std::string(labeling::to_string(p.label));
            out.push_back({c.config_id, v, prefix + ".share", p.share});
            out.push_back({c.config_id, v, prefix + ".alignment", p.alignment});
        }
        out.push_back({c.config_id, v, "curve.below_6.share", c.remainder_share});
    }
    return out;
}

std::vector<LongRow> to_long(const std::vector<DistributionRow>& rows) {
    std::vector<LongRow> out;
    for (const auto& r : rows) {
        const auto v = vname(r.vulnerability);
        out.push_back({r.config_id, v, "n", static_cast<double>(r.n)});
        for (auto o : labeling::kAllOutcomes) {
            out.push_back({r.config_id, v, "share_pct." + std::string(labeling::to_string(o)),
                           r.label_share_pct[ordinal(o)]});
        }
        out.push_back({r.config_id, v, "unanimous_negative_pct", r.unanimous_negative_pct});
    }
    return out;
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string long_csv(const std::vector<LongRow>& rows) {
    std::string out = "config,vulnerability,statistic,value\n";
    for (const auto& r : rows) {
        out += util::csv_row({r.config, r.vulnerability, r.statistic, r.value ? format_number(*r.value) : ""});
    }
    return out;
}

ordered_json long_json(const std::vector<LongRow>& rows) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : rows) {
        ordered_json o;
        o["config"] = r.config;
        o["vulnerability"] = r.vulnerability;
        o["statistic"] = r.statistic;
        o["value"] = r.value ? ordered_json(*r.value) : ordered_json(nullptr);
        arr.push_back(std::move(o));
    }
    return arr;
}

}  // namespace vulnlens::analytics
