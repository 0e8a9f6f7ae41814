#include "vulnlens/labeling.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <exception>
#include <set>
#include <thread>

#include "vulnlens/error.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/hash.hpp"
#include "vulnlens/util/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace vulnlens::labeling {

namespace {

const util::SystemClock kSystemClock;

std::string slug(std::string_view s) {
    std::string out;
    for (char c : s) {
        const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' ||
                          c == '-' || c == '_';
        out.push_back(keep ? c : '-');
    }
    return out;
}

VulnerabilityId vulnerability_from(const json& j, const char* key) {
    const auto text = j.at(key).get<std::string>();
    const auto v = codebook::parse_vulnerability(text);
    if (!v) throw IntegrityError("unknown vulnerability '" + text + "'");
    return *v;
}

}  // namespace

std::string LabelingConfig::derive_id(const std::string& model_name, PromptStrategy strategy, VulnerabilityId v,
                                      int k) {
    return slug(model_name) + "__" + std::string(codebook::to_string(strategy)) + "__" +
           std::string(codebook::to_string(v)) + "__k" + std::to_string(k);
}

LabelingConfig make_config(gateway::ProviderConfig provider, PromptStrategy strategy, VulnerabilityId v, int k,
                           std::uint64_t run_seed) {
    if (k < 1) throw ConfigError("k must be >= 1");
    LabelingConfig cfg;
    cfg.config_id = LabelingConfig::derive_id(provider.model_name, strategy, v, k);
    cfg.provider = std::move(provider);
    cfg.strategy = strategy;
    cfg.vulnerability = v;
    cfg.k = k;
    cfg.run_seed = run_seed;
    return cfg;
}

std::string_view to_string(MissingReason r) {
    switch (r) {
        case MissingReason::none: return "none";
        case MissingReason::parse_failure: return "parse_failure";
        case MissingReason::transport_failure: return "transport_failure";
    }
    return "none";
}

ordered_json to_json(const LabelRecord& r) {
    ordered_json j;
    j["narrative_id"] = r.narrative_id;
    j["vulnerability"] = codebook::to_string(r.vulnerability);
    j["config_id"] = r.config_id;
    j["iteration"] = r.iteration;
    j["outcome"] = r.outcome ? json(to_string(*r.outcome)) : json(nullptr);
    j["missing"] = to_string(r.missing);
    j["notes_text"] = r.notes_text;
    j["retries_used"] = r.retries_used;
    j["timestamp"] = r.timestamp;
    return j;
}

LabelRecord record_from_json(const json& j) {
    LabelRecord r;
    r.narrative_id = j.at("narrative_id").get<std::string>();
    r.vulnerability = vulnerability_from(j, "vulnerability");
    r.config_id = j.at("config_id").get<std::string>();
    r.iteration = j.at("iteration").get<int>();
    if (!j.at("outcome").is_null()) {
        const auto o = parse_outcome(j["outcome"].get<std::string>());
        if (!o) throw IntegrityError("bad outcome in label record");
        r.outcome = *o;
    }
    const auto missing = j.value("missing", "none");
    r.missing = missing == "parse_failure"       ? MissingReason::parse_failure
                : missing == "transport_failure" ? MissingReason::transport_failure
                                                 : MissingReason::none;
    r.notes_text = j.value("notes_text", "");
    r.retries_used = j.value("retries_used", 0);
    r.timestamp = j.value("timestamp", "");
    return r;
}

std::vector<LabelTarget> targets_from(const std::vector<corpus::Narrative>& narratives) {
    std::vector<LabelTarget> out;
    out.reserve(narratives.size());
    for (const auto& n : narratives) out.push_back({n.id, n.clean_text});
    return out;
}

std::uint64_t request_seed(const LabelingConfig& cfg, const std::string& narrative_id, int iteration) {
    return util::derive_seed(cfg.run_seed, cfg.config_id + "/" + narrative_id + "/" + std::to_string(iteration));
}

fs::path run_dir(const fs::path& runs_root, const std::string& config_id) { return runs_root / config_id; }

ordered_json make_manifest(const LabelingConfig& cfg, const codebook::RenderedPrompt& prompt,
                           const std::string& code_version, const std::string& created) {
    ordered_json content;
    content["config_id"] = cfg.config_id;
    content["vulnerability"] = codebook::to_string(cfg.vulnerability);
    content["strategy"] = codebook::to_string(cfg.strategy);
    content["k"] = cfg.k;
    content["run_seed"] = cfg.run_seed;
    content["provider"] = gateway::to_json(cfg.provider);
    content["prompt_sha256"] = util::sha256_hex(prompt.instruction_text);

    ordered_json manifest = content;
    manifest["content_hash"] = util::sha256_hex(content.dump());
    manifest["code_version"] = code_version;
    manifest["created"] = created;
    return manifest;
}

RunReport run_labeling(const std::vector<LabelTarget>& targets, const LabelingConfig& cfg,
                       const codebook::RenderedPrompt& prompt, gateway::Gateway& gateway, const fs::path& runs_root,
                       const RunOptions& options) {
    if (cfg.k < 1) throw ConfigError("k must be >= 1");
    const util::Clock& clock = options.clock ? *options.clock : kSystemClock;
    const fs::path dir = run_dir(runs_root, cfg.config_id);
    const fs::path manifest_path = dir / "manifest.json";
    const fs::path records_path = dir / "records.jsonl";

    auto manifest = make_manifest(cfg, prompt, options.code_version, util::iso_timestamp(clock.now()));
    if (fs::exists(manifest_path)) {
        const auto existing = json::parse(util::read_file(manifest_path));
        if (existing.value("content_hash", "") != manifest["content_hash"].get<std::string>()) {
            throw PreconditionError("run " + cfg.config_id +
                                    ": existing manifest describes a different configuration; not resumable");
        }
    } else {
        util::write_atomic(manifest_path, manifest.dump(2) + "\n");
    }

    std::set<std::pair<std::string, int>> done;
    RunReport report;
    for (const auto& row : util::read_jsonl(records_path)) {
        const auto r = record_from_json(row);
        if (r.config_id != cfg.config_id) throw IntegrityError(records_path.string() + ": foreign config id");
        if (!done.emplace(r.narrative_id, r.iteration).second) {
            throw IntegrityError(records_path.string() + ": duplicate record for " + r.narrative_id + " iteration " +
                                 std::to_string(r.iteration));
        }
    }
    report.already_present = done.size();

    struct Task {
        const LabelTarget* target;
        int iteration;
    };
    std::vector<Task> tasks;
    for (const auto& t : targets) {
        if (t.text.empty()) throw PreconditionError("narrative " + t.id + " has empty text");
        for (int it = 0; it < cfg.k; ++it) {
            if (!done.count({t.id, it})) tasks.push_back({&t, it});
        }
    }

    const std::uint64_t calls_before = gateway.calls_issued();
    std::vector<std::optional<LabelRecord>> slots(tasks.size());
    std::mutex mu;
    std::condition_variable ready;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::exception_ptr failure;

    const auto work = [&] {
        while (!stop) {
            const std::size_t i = next++;
            if (i >= tasks.size()) break;
            const Task& task = tasks[i];
            LabelRecord rec;
            rec.narrative_id = task.target->id;
            rec.vulnerability = cfg.vulnerability;
            rec.config_id = cfg.config_id;
            rec.iteration = task.iteration;
            try {
                const auto seed = request_seed(cfg, task.target->id, task.iteration);
                const auto result = gateway::classify_with_retry(gateway, cfg.provider, prompt, task.target->text, seed);
                rec.outcome = result.outcome;
                rec.missing = result.outcome ? MissingReason::none : MissingReason::parse_failure;
                rec.notes_text = result.notes_text;
                rec.retries_used = result.retries_used;
            } catch (const ProviderError& e) {
                rec.missing = MissingReason::transport_failure;
                rec.notes_text = e.what();
            } catch (...) {
                std::lock_guard lk(mu);
                if (!failure) failure = std::current_exception();
                stop = true;
                ready.notify_all();
                return;
            }
            rec.timestamp = util::iso_timestamp(clock.now());
            std::lock_guard lk(mu);
            slots[i] = std::move(rec);
            ready.notify_all();
        }
        std::lock_guard lk(mu);
        ready.notify_all();
    };

    const int workers = std::max(1, std::min<int>(options.concurrency > 0 ? options.concurrency
                                                                          : cfg.provider.max_concurrent,
                                                  static_cast<int>(tasks.size())));
    std::vector<std::thread> pool;
    if (!tasks.empty()) {
        pool.reserve(workers);
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    }

    // Persist strictly in task order so record files are reproducible.
    {
        util::JsonlAppender out(records_path);
        std::unique_lock lk(mu);
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            ready.wait(lk, [&] { return slots[i].has_value() || stop.load(); });
            if (!slots[i]) break;
            const LabelRecord rec = std::move(*slots[i]);
            slots[i].reset();
            lk.unlock();
            out.append(to_json(rec));
            ++report.new_requests;
            if (rec.missing == MissingReason::parse_failure) ++report.parse_missing;
            if (rec.missing == MissingReason::transport_failure) ++report.transport_missing;
            lk.lock();
        }
    }
    stop = true;
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    report.total_records = report.already_present + report.new_requests;
    report.completion_calls = gateway.calls_issued() - calls_before;
    return report;
}

Run load_run(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw NotFoundError("no run at " + dir.string());
    Run run;
    run.dir = dir;
    run.manifest = ordered_json::parse(util::read_file(manifest_path));
    const auto& m = run.manifest;
    run.config.config_id = m.at("config_id").get<std::string>();
    run.config.vulnerability = vulnerability_from(m, "vulnerability");
    const auto strategy = codebook::parse_strategy(m.at("strategy").get<std::string>());
    if (!strategy) throw IntegrityError(manifest_path.string() + ": bad strategy");
    run.config.strategy = *strategy;
    run.config.k = m.at("k").get<int>();
    run.config.run_seed = m.at("run_seed").get<std::uint64_t>();
    run.config.provider = gateway::provider_from_json(m.at("provider"));
    for (const auto& row : util::read_jsonl(dir / "records.jsonl")) run.records.push_back(record_from_json(row));
    return run;
}

std::vector<std::string> list_runs(const fs::path& runs_root) {
    std::vector<std::string> ids;
    if (!fs::exists(runs_root)) return ids;
    for (const auto& entry : fs::directory_iterator(runs_root)) {
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
            ids.push_back(entry.path().filename().string());
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------

bool operator==(const VoteDistribution& a, const VoteDistribution& b) {
    return a.counts == b.counts && a.n_missing == b.n_missing;
}

bool operator==(const ConsensusLabel& a, const ConsensusLabel& b) {
    return a.outcome == b.outcome && a.agreement_level == b.agreement_level && a.unanimous == b.unanimous &&
           a.tie_broken == b.tie_broken;
}

VoteDistribution tally_votes(const std::vector<LabelRecord>& records, int k) {
    if (records.empty()) throw IntegrityError("tally_votes: no records");
    if (static_cast<int>(records.size()) != k) {
        throw IntegrityError("tally_votes: " + records.front().narrative_id + " has " +
                             std::to_string(records.size()) + " records, expected " + std::to_string(k));
    }
    std::vector<bool> seen(k, false);
    VoteDistribution votes;
    for (const auto& r : records) {
        if (r.narrative_id != records.front().narrative_id || r.config_id != records.front().config_id) {
            throw IntegrityError("tally_votes: records span several narratives or configs");
        }
        if (r.iteration < 0 || r.iteration >= k || seen[r.iteration]) {
            throw IntegrityError("tally_votes: " + r.narrative_id + " iteration " + std::to_string(r.iteration) +
                                 " is out of range or repeated");
        }
        seen[r.iteration] = true;
        if (r.outcome) {
            ++votes.counts[ordinal(*r.outcome)];
        } else {
            ++votes.n_missing;
        }
    }
    return votes;
}

ConsensusLabel consensus(const VoteDistribution& votes, ConsensusRule rule) {
    ConsensusLabel c;
    const int top = *std::max_element(votes.counts.begin(), votes.counts.end());
    const int n_top = static_cast<int>(std::count(votes.counts.begin(), votes.counts.end(), top));
    c.agreement_level = top;
    bool decided = top > 0 && n_top == 1;
    if (decided && rule == ConsensusRule::strict_majority) decided = 2 * top > votes.n_valid();
    if (decided) {
        c.outcome = static_cast<LabelOutcome>(std::find(votes.counts.begin(), votes.counts.end(), top) -
                                              votes.counts.begin());
    } else {
        c.outcome = LabelOutcome::Inconclusive;
        c.tie_broken = true;
    }
    c.unanimous = decided && top == votes.k() && votes.n_missing == 0;
    return c;
}

std::vector<NarrativeSummary> summarize_run(const Run& run, ConsensusRule rule) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<LabelRecord>> grouped;
    for (const auto& r : run.records) {
        auto& bucket = grouped[r.narrative_id];
        if (bucket.empty()) order.push_back(r.narrative_id);
        bucket.push_back(r);
    }
    std::vector<NarrativeSummary> out;
    out.reserve(order.size());
    for (const auto& id : order) {
        auto& recs = grouped[id];
        NarrativeSummary s;
        s.narrative_id = id;
        s.votes = tally_votes(recs, run.config.k);
        s.consensus = consensus(s.votes, rule);
        const auto last = std::max_element(recs.begin(), recs.end(),
                                           [](const auto& a, const auto& b) { return a.iteration < b.iteration; });
        s.latest_notes = last->notes_text;
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------

EvaluationSample sample_evaluation_set(const ReferenceLabels& reference, const StratumTargets& targets,
                                       std::uint64_t seed) {
    for (auto v : codebook::kAllVulnerabilities) {
        const bool covered = std::any_of(reference.begin(), reference.end(),
                                         [&](const auto& row) { return row.second.count(v) > 0; });
        if (!covered) {
            throw PreconditionError("reference labels do not cover " + std::string(codebook::to_string(v)));
        }
    }

    EvaluationSample sample;
    std::set<std::string> in_union;
    const auto take = [&](VulnerabilityId v, LabelOutcome label, std::vector<std::string> pool, int target) {
        util::Rng rng(util::derive_seed(seed, std::string(codebook::to_string(v)) + "/" + std::string(to_string(label))));
        rng.shuffle(pool);
        RealizedStratum s{v, label, target, {}};
        s.narrative_ids.assign(pool.begin(), pool.begin() + std::min<std::size_t>(pool.size(), target));
        for (const auto& id : s.narrative_ids) {
            if (in_union.insert(id).second) sample.narrative_ids.push_back(id);
        }
        sample.strata.push_back(std::move(s));
    };

    for (auto v : codebook::kAllVulnerabilities) {
        std::array<std::vector<std::string>, 3> pools;
        for (const auto& [id, labels] : reference) {
            const auto it = labels.find(v);
            if (it != labels.end()) pools[ordinal(it->second)].push_back(id);
        }
        const auto& neg = pools[ordinal(LabelOutcome::Negative)];
        const auto& inc = pools[ordinal(LabelOutcome::Inconclusive)];
        const auto& pos = pools[ordinal(LabelOutcome::Positive)];
        const int pos_taken = std::min<int>(targets.positive, static_cast<int>(pos.size()));
        const int inc_target = targets.inconclusive + (targets.positive - pos_taken);
        const auto vname = std::string(codebook::to_string(v));
        if (static_cast<int>(neg.size()) < targets.negative) {
            throw SamplingError("stratum " + vname + "/negative has " + std::to_string(neg.size()) +
                                " narratives, " + std::to_string(targets.negative) + " requested");
        }
        if (static_cast<int>(inc.size()) < inc_target) {
            throw SamplingError("stratum " + vname + "/inconclusive has " + std::to_string(inc.size()) +
                                " narratives, " + std::to_string(inc_target) +
                                " requested after positive shortfall reallocation");
        }
        take(v, LabelOutcome::Negative, neg, targets.negative);
        take(v, LabelOutcome::Positive, pos, pos_taken);
        take(v, LabelOutcome::Inconclusive, inc, inc_target);
    }
    return sample;
}

// ---------------------------------------------------------------------------

std::string_view to_string(CoderRole r) { return r == CoderRole::coder ? "coder" : "adjudicator"; }

std::optional<CoderRole> parse_coder_role(std::string_view s) {
    if (s == "coder") return CoderRole::coder;
    if (s == "adjudicator") return CoderRole::adjudicator;
    return std::nullopt;
}

std::string_view to_string(AdjudicationSource s) {
    return s == AdjudicationSource::coder_agreement ? "coder_agreement" : "adjudication";
}

ordered_json to_json(const HumanLabel& l) {
    ordered_json j;
    j["narrative_id"] = l.narrative_id;
    j["vulnerability"] = codebook::to_string(l.vulnerability);
    j["coder_id"] = l.coder_id;
    j["role"] = to_string(l.role);
    j["outcome"] = to_string(l.outcome);
    j["note"] = l.note ? json(*l.note) : json(nullptr);
    j["timestamp"] = l.timestamp;
    j["idempotency_key"] = l.idempotency_key ? json(*l.idempotency_key) : json(nullptr);
    j["revision"] = l.revision;
    return j;
}

HumanLabel human_label_from_json(const json& j) {
    HumanLabel l;
    l.narrative_id = j.at("narrative_id").get<std::string>();
    l.vulnerability = vulnerability_from(j, "vulnerability");
    l.coder_id = j.at("coder_id").get<std::string>();
    const auto role = parse_coder_role(j.value("role", "coder"));
    if (!role) throw IntegrityError("bad coder role");
    l.role = *role;
    const auto o = parse_outcome(j.at("outcome").get<std::string>());
    if (!o) throw IntegrityError("bad outcome in human label");
    l.outcome = *o;
    if (j.contains("note") && j["note"].is_string()) l.note = j["note"].get<std::string>();
    l.timestamp = j.value("timestamp", "");
    if (j.contains("idempotency_key") && j["idempotency_key"].is_string()) {
        l.idempotency_key = j["idempotency_key"].get<std::string>();
    }
    l.revision = j.value("revision", false);
    return l;
}

std::string_view state_name(const AdjudicationState& s) {
    if (std::holds_alternative<AwaitingCoders>(s)) return "awaiting_coders";
    if (std::holds_alternative<NeedsAdjudication>(s)) return "needs_adjudication";
    return to_string(std::get<AdjudicatedLabel>(s).source);
}

ordered_json to_json(const AdjudicationState& s) {
    ordered_json j;
    j["state"] = state_name(s);
    const auto labels_json = [](const std::vector<HumanLabel>& labels) {
        ordered_json arr = ordered_json::array();
        for (const auto& l : labels) arr.push_back(to_json(l));
        return arr;
    };
    if (const auto* a = std::get_if<AwaitingCoders>(&s)) {
        j["coder_labels"] = labels_json(a->coder_labels);
    } else if (const auto* n = std::get_if<NeedsAdjudication>(&s)) {
        j["coder_labels"] = labels_json(n->coder_labels);
    } else {
        const auto& d = std::get<AdjudicatedLabel>(s);
        j["outcome"] = to_string(d.outcome);
        j["source"] = to_string(d.source);
    }
    return j;
}

HumanLabelStore::HumanLabelStore(fs::path path, int required_coders, const util::Clock* clock)
    : path_(std::move(path)), required_coders_(required_coders), clock_(clock ? clock : &kSystemClock) {
    if (required_coders_ < 2) throw ConfigError("adjudication needs at least two coders");
    for (const auto& row : util::read_jsonl(path_)) {
        HumanLabel l = human_label_from_json(row);
        by_key_[{l.narrative_id, l.vulnerability}].push_back(log_.size());
        log_.push_back(std::move(l));
    }
}

std::vector<HumanLabel> HumanLabelStore::coder_labels_locked(const Key& key) const {
    std::vector<HumanLabel> out;
    const auto it = by_key_.find(key);
    if (it == by_key_.end()) return out;
    std::map<std::string, std::size_t> latest;  // coder -> position in `out`
    for (std::size_t idx : it->second) {
        const auto& l = log_[idx];
        if (l.role != CoderRole::coder) continue;
        const auto pos = latest.find(l.coder_id);
        if (pos == latest.end()) {
            latest[l.coder_id] = out.size();
            out.push_back(l);
        } else {
            out[pos->second] = l;
        }
    }
    return out;
}

AdjudicationState HumanLabelStore::state_locked(const Key& key) const {
    auto coders = coder_labels_locked(key);
    if (static_cast<int>(coders.size()) < required_coders_) {
        return AwaitingCoders{key.first, key.second, std::move(coders)};
    }
    // Decision uses the first `required_coders_` coders to label the item.
    coders.resize(required_coders_);
    const bool agree = std::all_of(coders.begin(), coders.end(),
                                   [&](const HumanLabel& l) { return l.outcome == coders.front().outcome; });
    if (agree) return AdjudicatedLabel{key.first, key.second, coders.front().outcome, AdjudicationSource::coder_agreement};
    const auto it = by_key_.find(key);
    for (std::size_t idx : it->second) {
        const auto& l = log_[idx];
        if (l.role == CoderRole::adjudicator) {
            return AdjudicatedLabel{key.first, key.second, l.outcome, AdjudicationSource::adjudication};
        }
    }
    return NeedsAdjudication{key.first, key.second, std::move(coders)};
}

void HumanLabelStore::append_locked(HumanLabel label) {
    if (label.timestamp.empty()) label.timestamp = util::iso_timestamp(clock_->now());
    util::JsonlAppender out(path_);
    out.append(to_json(label));
    by_key_[{label.narrative_id, label.vulnerability}].push_back(log_.size());
    log_.push_back(std::move(label));
}

bool HumanLabelStore::record(HumanLabel label) {
    if (label.coder_id.empty()) throw ValidationError("coder_id must not be empty");
    std::lock_guard lk(mu_);
    const Key key{label.narrative_id, label.vulnerability};
    if (label.idempotency_key) {
        for (const auto& l : log_) {
            if (l.idempotency_key != label.idempotency_key) continue;
            if (l.narrative_id == label.narrative_id && l.vulnerability == label.vulnerability &&
                l.coder_id == label.coder_id && l.outcome == label.outcome && l.role == label.role) {
                return false;
            }
            throw ConflictError("idempotency key " + *label.idempotency_key + " was used for a different submission");
        }
    }
    const auto state = state_locked(key);
    const std::string item = label.narrative_id + "/" + std::string(codebook::to_string(label.vulnerability));
    if (label.role == CoderRole::coder) {
        if (std::holds_alternative<AdjudicatedLabel>(state) || std::holds_alternative<NeedsAdjudication>(state)) {
            throw ConflictError(item + " already has its coder labels");
        }
        for (const auto& l : coder_labels_locked(key)) {
            if (l.coder_id == label.coder_id) {
                throw ConflictError(label.coder_id + " already labelled " + item + "; use the revision API");
            }
        }
    } else if (!std::holds_alternative<NeedsAdjudication>(state)) {
        throw ConflictError(item + " is in state " + std::string(state_name(state)) +
                            " and cannot be adjudicated");
    }
    label.revision = false;
    append_locked(std::move(label));
    return true;
}

void HumanLabelStore::revise(HumanLabel label) {
    std::lock_guard lk(mu_);
    const Key key{label.narrative_id, label.vulnerability};
    if (label.role != CoderRole::coder) throw ValidationError("only coder labels can be revised");
    const auto coders = coder_labels_locked(key);
    const bool has = std::any_of(coders.begin(), coders.end(),
                                 [&](const HumanLabel& l) { return l.coder_id == label.coder_id; });
    if (!has) throw NotFoundError(label.coder_id + " has no label to revise");
    if (!std::holds_alternative<AwaitingCoders>(state_locked(key))) {
        throw ConflictError("item is decided or awaiting adjudication; labels are frozen");
    }
    label.revision = true;
    append_locked(std::move(label));
}

std::variant<AdjudicatedLabel, NeedsAdjudication> HumanLabelStore::adjudicate(const std::string& narrative_id,
                                                                              VulnerabilityId v) const {
    std::lock_guard lk(mu_);
    auto state = state_locked({narrative_id, v});
    if (auto* a = std::get_if<AwaitingCoders>(&state)) {
        throw PreconditionError(narrative_id + "/" + std::string(codebook::to_string(v)) + " has " +
                                std::to_string(a->coder_labels.size()) + " coder labels; " +
                                std::to_string(required_coders_) + " are required");
    }
    if (auto* n = std::get_if<NeedsAdjudication>(&state)) return std::move(*n);
    return std::get<AdjudicatedLabel>(state);
}

AdjudicationState HumanLabelStore::state(const std::string& narrative_id, VulnerabilityId v) const {
    std::lock_guard lk(mu_);
    return state_locked({narrative_id, v});
}

std::vector<HumanLabel> HumanLabelStore::coder_labels(const std::string& narrative_id, VulnerabilityId v) const {
    std::lock_guard lk(mu_);
    return coder_labels_locked({narrative_id, v});
}

std::map<std::pair<std::string, VulnerabilityId>, AdjudicatedLabel> HumanLabelStore::final_labels() const {
    std::lock_guard lk(mu_);
    std::map<Key, AdjudicatedLabel> out;
    for (const auto& [key, _] : by_key_) {
        const auto s = state_locked(key);
        if (const auto* d = std::get_if<AdjudicatedLabel>(&s)) out.emplace(key, *d);
    }
    return out;
}

std::vector<HumanLabel> HumanLabelStore::all() const {
    std::lock_guard lk(mu_);
    return log_;
}

}  // namespace vulnlens::labeling
