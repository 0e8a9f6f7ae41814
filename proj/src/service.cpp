#include "vulnlens/service.hpp"

#include <algorithm>
#include <httplib.h>

#include "vulnlens/analytics.hpp"
#include "vulnlens/corpus.hpp"
#include "vulnlens/counterfactual.hpp"
#include "vulnlens/error.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/text.hpp"

namespace vulnlens::service {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using labeling::LabelOutcome;

std::string_view to_string(FlagReason f) {
    switch (f) {
        case FlagReason::human_llm_disagreement: return "human_llm_disagreement";
        case FlagReason::inconclusive_consensus: return "inconclusive_consensus";
        case FlagReason::low_agreement: return "low_agreement";
        case FlagReason::counterfactual_validation_failure: return "counterfactual_validation_failure";
    }
    return "?";
}

std::optional<FlagReason> parse_flag(std::string_view s) {
    for (auto f : kAllFlags)
        if (s == to_string(f)) return f;
    return std::nullopt;
}

TokenTable load_tokens(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("token file not found: " + path.string());
    TokenTable out;
    try {
        const auto j = json::parse(util::read_file(path));
        for (const auto& [token, v] : j.items()) {
            Coder c;
            c.coder_id = v.at("coder_id").get<std::string>();
            const auto role = labeling::parse_coder_role(v.value("role", "coder"));
            if (!role) throw ConfigError("token file: bad role for " + c.coder_id);
            c.role = *role;
            out[token] = c;
        }
    } catch (const json::exception& e) {
        throw ConfigError("token file " + path.string() + ": " + e.what());
    }
    return out;
}

int status_for(const std::string& code) {
    if (code == "not_found") return 404;
    if (code == "conflict") return 409;
    if (code == "validation_error" || code == "usage_error" || code == "domain_error") return 400;
    if (code == "unauthorized") return 401;
    if (code == "forbidden") return 403;
    if (code == "precondition_error" || code == "integrity_error") return 422;
    return 500;
}

namespace {

class HttpError : public Error {
public:
    HttpError(const std::string& code, const std::string& msg) : Error(code, msg) {}
};

struct Stores {
    std::map<std::string, std::string> texts;                     // narrative or variant id -> text
    std::set<std::string> failed_variant_ids;                     // validation failed
    std::set<std::string> bases_with_failures;
};

Stores load_stores(const Workspace& ws) {
    Stores s;
    if (fs::exists(ws.corpus())) {
        for (const auto& n : corpus::load_corpus(ws.corpus())) s.texts[n.id] = n.clean_text;
    }
    if (fs::exists(ws.variants())) {
        for (const auto& v : counterfactual::load_variants(ws.variants())) {
            const auto id = counterfactual::variant_id(v.base_id, v.sex, v.race);
            s.texts[id] = v.text;
            if (!v.validated) {
                s.failed_variant_ids.insert(id);
                s.bases_with_failures.insert(v.base_id);
            }
        }
    }
    return s;
}

labeling::Run load_run_checked(const Workspace& ws, const std::string& run_id) {
    const auto ids = labeling::list_runs(ws.runs());
    if (std::find(ids.begin(), ids.end(), run_id) == ids.end()) throw NotFoundError("unknown run " + run_id);
    return labeling::load_run(labeling::run_dir(ws.runs(), run_id));
}

ordered_json votes_json(const labeling::VoteDistribution& v) {
    ordered_json j;
    for (auto o : labeling::kAllOutcomes) j[std::string(labeling::to_string(o))] = v.count(o);
    j["missing"] = v.n_missing;
    return j;
}

ordered_json consensus_json(const labeling::ConsensusLabel& c) {
    ordered_json j;
    j["outcome"] = labeling::to_string(c.outcome);
    j["agreement_level"] = c.agreement_level;
    j["unanimous"] = c.unanimous;
    j["tie_broken"] = c.tie_broken;
    return j;
}

struct FlaggedItem {
    const labeling::NarrativeSummary* summary;
    std::vector<FlagReason> flags;  // severity order
};

std::vector<FlagReason> flags_for(const labeling::NarrativeSummary& s, const std::optional<LabelOutcome>& human,
                                  const Stores& stores, int threshold) {
    std::vector<FlagReason> f;
    if (human && *human != s.consensus.outcome) f.push_back(FlagReason::human_llm_disagreement);
    if (s.consensus.outcome == LabelOutcome::Inconclusive) f.push_back(FlagReason::inconclusive_consensus);
    if (s.consensus.agreement_level < threshold) f.push_back(FlagReason::low_agreement);
    if (stores.failed_variant_ids.count(s.narrative_id) || stores.bases_with_failures.count(s.narrative_id)) {
        f.push_back(FlagReason::counterfactual_validation_failure);
    }
    return f;
}

int severity(FlagReason f) {
    int i = 0;
    for (auto g : kAllFlags) {
        if (g == f) return i;
        ++i;
    }
    return i;
}

std::string header(const Request& r, const std::string& name) {
    auto it = r.headers.find(name);
    return it == r.headers.end() ? std::string() : it->second;
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : path) {
        if (c == '/') {
            if (!cur.empty()) parts.push_back(httplib::detail::decode_url(cur, false));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) parts.push_back(httplib::detail::decode_url(cur, false));
    return parts;
}

int parse_positive(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size() || v < 1) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ValidationError(what + " must be a positive integer");
    }
}

}  // namespace

ReviewService::ReviewService(Workspace workspace, TokenTable tokens, ServiceOptions options)
    : ws_(std::move(workspace)),
      tokens_(std::move(tokens)),
      options_(options),
      labels_(std::make_unique<labeling::HumanLabelStore>(ws_.human_labels(), 2, options.clock)) {}

ordered_json ReviewService::list_runs() const {
    ordered_json arr = ordered_json::array();
    for (const auto& id : labeling::list_runs(ws_.runs())) {
        const auto run = labeling::load_run(labeling::run_dir(ws_.runs(), id));
        ordered_json j;
        j["id"] = id;
        j["vulnerability"] = codebook::to_string(run.config.vulnerability);
        j["strategy"] = codebook::to_string(run.config.strategy);
        j["model"] = run.config.provider.model_name;
        j["k"] = run.config.k;
        j["records"] = run.records.size();
        arr.push_back(std::move(j));
    }
    ordered_json out;
    out["runs"] = arr;
    return out;
}

std::vector<ordered_json> ReviewService::queue_items(const std::string& run_id, const QueueQuery& q) const {
    const auto run = load_run_checked(ws_, run_id);
    if (q.vulnerability && *q.vulnerability != run.config.vulnerability) {
        throw ValidationError("run " + run_id + " covers " + std::string(codebook::to_string(run.config.vulnerability)));
    }
    const auto v = run.config.vulnerability;
    const auto summaries = labeling::summarize_run(run);
    const auto stores = load_stores(ws_);
    const auto finals = labels_->final_labels();

    // Votes of every run on the same vulnerability, for side-by-side review.
    std::map<std::string, std::vector<labeling::NarrativeSummary>> others;
    for (const auto& id : labeling::list_runs(ws_.runs())) {
        const auto other = id == run_id ? run : labeling::load_run(labeling::run_dir(ws_.runs(), id));
        if (other.config.vulnerability != v) continue;
        others[id] = id == run_id ? summaries : labeling::summarize_run(other);
    }
    std::map<std::string, std::map<std::string, const labeling::NarrativeSummary*>> by_narrative;
    for (const auto& [cid, sums] : others)
        for (const auto& s : sums) by_narrative[s.narrative_id][cid] = &s;

    std::vector<FlaggedItem> flagged;
    for (const auto& s : summaries) {
        std::optional<LabelOutcome> human;
        auto it = finals.find({s.narrative_id, v});
        if (it != finals.end()) human = it->second.outcome;
        auto f = flags_for(s, human, stores, q.agreement_threshold);
        if (f.empty()) continue;
        if (!q.filter.empty() &&
            std::none_of(f.begin(), f.end(), [&](FlagReason r) { return q.filter.count(r) > 0; })) {
            continue;
        }
        flagged.push_back({&s, std::move(f)});
    }
    std::stable_sort(flagged.begin(), flagged.end(), [](const FlaggedItem& a, const FlaggedItem& b) {
        const int sa = severity(a.flags.front()), sb = severity(b.flags.front());
        if (sa != sb) return sa < sb;
        return a.summary->narrative_id < b.summary->narrative_id;
    });

    std::vector<ordered_json> out;
    for (const auto& item : flagged) {
        const auto& s = *item.summary;
        ordered_json j;
        j["narrative_id"] = s.narrative_id;
        j["vulnerability"] = codebook::to_string(v);
        auto t = stores.texts.find(s.narrative_id);
        j["clean_text"] = t == stores.texts.end() ? ordered_json(nullptr) : ordered_json(t->second);
        ordered_json votes, cons, notes;
        for (const auto& [cid, sp] : by_narrative[s.narrative_id]) {
            votes[cid] = votes_json(sp->votes);
            cons[cid] = consensus_json(sp->consensus);
            notes[cid] = sp->latest_notes;
        }
        j["llm_votes"] = votes;
        j["consensus"] = cons;
        j["model_notes"] = notes;
        ordered_json humans = ordered_json::array();
        for (const auto& l : labels_->coder_labels(s.narrative_id, v)) humans.push_back(labeling::to_json(l));
        j["human_labels"] = humans;
        j["adjudication"] = labeling::to_json(labels_->state(s.narrative_id, v));
        j["flag_reason"] = to_string(item.flags.front());
        ordered_json fl = ordered_json::array();
        for (auto f : item.flags) fl.push_back(to_string(f));
        j["flags"] = fl;
        out.push_back(std::move(j));
    }
    return out;
}

ordered_json ReviewService::review_queue(const std::string& run_id, const QueueQuery& q) const {
    if (q.page < 1 || q.page_size < 1) throw ValidationError("page and page_size must be positive");
    const auto items = queue_items(run_id, q);
    const std::size_t total = items.size();
    const std::size_t size = static_cast<std::size_t>(q.page_size);
    const std::size_t pages = (total + size - 1) / size;
    const std::size_t begin = std::min(total, (static_cast<std::size_t>(q.page) - 1) * size);
    const std::size_t end = std::min(total, begin + size);
    ordered_json out;
    out["run"] = run_id;
    out["page"] = q.page;
    out["page_size"] = q.page_size;
    out["total_items"] = total;
    out["total_pages"] = pages;
    out["agreement_threshold"] = q.agreement_threshold;
    ordered_json arr = ordered_json::array();
    for (std::size_t i = begin; i < end; ++i) arr.push_back(items[i]);
    out["items"] = arr;
    return out;
}

ordered_json ReviewService::run_summary(const std::string& run_id) const {
    const auto run = load_run_checked(ws_, run_id);
    const auto summaries = labeling::summarize_run(run);
    const auto v = run.config.vulnerability;
    std::array<long, 3> counts{};
    long unanimous = 0, unanimous_neg = 0;
    for (const auto& s : summaries) {
        ++counts[labeling::ordinal(s.consensus.outcome)];
        if (s.consensus.unanimous) ++unanimous;
        if (s.votes.count(LabelOutcome::Negative) == run.config.k) ++unanimous_neg;
    }
    QueueQuery q;
    q.agreement_threshold = options_.agreement_threshold;
    const auto items = queue_items(run_id, q);
    std::map<std::string, long> by_flag;
    for (auto f : kAllFlags) by_flag[std::string(to_string(f))] = 0;
    long adjudicated = 0;
    for (const auto& item : items) {
        for (const auto& f : item["flags"]) ++by_flag[f.get<std::string>()];
        const auto& state = item["adjudication"]["state"];
        if (state != "awaiting_coders" && state != "needs_adjudication") ++adjudicated;
    }

    ordered_json out;
    out["run"] = run_id;
    out["vulnerability"] = codebook::to_string(v);
    out["n_narratives"] = summaries.size();
    ordered_json c;
    for (auto o : labeling::kAllOutcomes) c[std::string(labeling::to_string(o))] = counts[labeling::ordinal(o)];
    out["consensus_counts"] = c;
    const double n = static_cast<double>(summaries.size());
    out["unanimity"] = {{"unanimous_share", n > 0 ? unanimous / n : 0.0},
                        {"unanimous_negative_share", n > 0 ? unanimous_neg / n : 0.0}};
    ordered_json qs;
    for (auto f : kAllFlags) qs[std::string(to_string(f))] = by_flag[std::string(to_string(f))];
    out["queue_sizes"] = qs;
    out["agreement_threshold"] = options_.agreement_threshold;
    ordered_json adj;
    adj["adjudicated"] = adjudicated;
    adj["flagged"] = items.size();
    adj["fraction"] = items.empty() ? ordered_json(nullptr)
                                    : ordered_json(static_cast<double>(adjudicated) / static_cast<double>(items.size()));
    out["adjudication_progress"] = adj;
    return out;
}

ordered_json ReviewService::submit_label(const std::string& narrative_id, const std::string& vulnerability,
                                         const std::string& token, const json& body,
                                         const std::optional<std::string>& idempotency_key, bool* created) {
    auto t = tokens_.find(token);
    if (token.empty() || t == tokens_.end()) throw HttpError("unauthorized", "missing or unknown API token");
    const auto v = codebook::parse_vulnerability(vulnerability);
    if (!v) throw NotFoundError("unknown vulnerability " + vulnerability);
    const auto stores = load_stores(ws_);
    if (!stores.texts.count(narrative_id)) throw NotFoundError("unknown narrative " + narrative_id);
    if (!body.is_object() || !body.contains("outcome") || !body["outcome"].is_string()) {
        throw ValidationError("body must be an object with an outcome");
    }
    const auto outcome = labeling::parse_outcome(body["outcome"].get<std::string>());
    if (!outcome) throw ValidationError("invalid outcome '" + body["outcome"].get<std::string>() + "'");

    labeling::HumanLabel l;
    l.narrative_id = narrative_id;
    l.vulnerability = *v;
    l.coder_id = t->second.coder_id;
    l.role = t->second.role;
    l.outcome = *outcome;
    if (body.contains("note") && body["note"].is_string()) l.note = body["note"].get<std::string>();
    l.idempotency_key = idempotency_key;
    const bool fresh = labels_->record(std::move(l));
    if (created) *created = fresh;
    ordered_json out;
    out["recorded"] = fresh;
    out["state"] = labeling::to_json(labels_->state(narrative_id, *v));
    return out;
}

ordered_json ReviewService::report(const std::string& type, const std::optional<std::string>& run_id) const {
    std::vector<std::string> ids = labeling::list_runs(ws_.runs());
    if (run_id) {
        if (std::find(ids.begin(), ids.end(), *run_id) == ids.end()) throw NotFoundError("unknown run " + *run_id);
        ids = {*run_id};
    }
    ordered_json rows = ordered_json::array();
    if (type == "distribution") {
        std::vector<analytics::RunView> views;
        for (const auto& id : ids) views.push_back(analytics::view_of(labeling::load_run(labeling::run_dir(ws_.runs(), id))));
        rows = analytics::long_json(analytics::to_long(analytics::distribution_report(views)));
    } else if (type == "metrics" || type == "entropy" || type == "curves" || type == "bias") {
        const fs::path file = type == "bias" ? ws_.bias() / "effects.json" : ws_.reports() / (type + ".json");
        if (!fs::exists(file)) throw NotFoundError("report " + type + " has not been generated");
        const auto all = ordered_json::parse(util::read_file(file));
        for (const auto& row : all) {
            if (!run_id || row.value("config", "") == *run_id) rows.push_back(row);
        }
    } else {
        throw NotFoundError("unknown report type " + type);
    }
    ordered_json out;
    out["type"] = type;
    if (run_id) out["run"] = *run_id;
    out["rows"] = rows;
    return out;
}

Response ReviewService::handle(const Request& r) {
    Response resp;
    try {
        const auto parts = split_path(r.path);
        auto query = [&](const std::string& k) -> std::optional<std::string> {
            auto it = r.query.find(k);
            if (it == r.query.end() || it->second.empty()) return std::nullopt;
            return it->second;
        };
        if (parts.empty() || parts[0] != "api") throw NotFoundError("no route for " + r.path);

        if (r.method == "GET" && parts.size() == 2 && parts[1] == "runs") {
            resp.body = list_runs();
        } else if (r.method == "GET" && parts.size() == 4 && parts[1] == "runs" && parts[3] == "summary") {
            resp.body = run_summary(parts[2]);
        } else if (r.method == "GET" && parts.size() == 4 && parts[1] == "runs" && parts[3] == "review") {
            QueueQuery q;
            q.agreement_threshold = options_.agreement_threshold;
            q.page_size = options_.page_size;
            if (auto v = query("vulnerability")) {
                q.vulnerability = codebook::parse_vulnerability(*v);
                if (!q.vulnerability) throw ValidationError("unknown vulnerability " + *v);
            }
            if (auto f = query("filter")) {
                std::string cur;
                for (char c : *f + ",") {
                    if (c != ',') {
                        cur += c;
                        continue;
                    }
                    const auto name = util::trim(cur);
                    cur.clear();
                    if (name.empty()) continue;
                    auto flag = parse_flag(name);
                    if (!flag) throw ValidationError("unknown flag " + name);
                    q.filter.insert(*flag);
                }
            }
            if (auto t = query("agreement_threshold")) q.agreement_threshold = parse_positive(*t, "agreement_threshold");
            if (auto p = query("page")) q.page = parse_positive(*p, "page");
            if (auto p = query("page_size")) q.page_size = parse_positive(*p, "page_size");
            resp.body = review_queue(parts[2], q);
        } else if (r.method == "POST" && parts.size() == 5 && parts[1] == "review" && parts[4] == "labels") {
            std::string auth = header(r, "authorization");
            std::string token;
            if (auth.rfind("Bearer ", 0) == 0) token = util::trim(auth.substr(7));
            json body;
            try {
                body = json::parse(r.body.empty() ? "{}" : r.body);
            } catch (const json::exception&) {
                throw ValidationError("request body is not valid JSON");
            }
            std::optional<std::string> key;
            if (auto k = header(r, "idempotency-key"); !k.empty()) key = k;
            bool created = false;
            resp.body = submit_label(parts[2], parts[3], token, body, key, &created);
            resp.status = created ? 201 : 200;
        } else if (r.method == "GET" && parts.size() == 3 && parts[1] == "reports") {
            resp.body = report(parts[2], query("run"));
        } else {
            throw NotFoundError("no route for " + r.method + " " + r.path);
        }
    } catch (const Error& e) {
        resp.status = status_for(e.code());
        resp.body = ordered_json{{"code", e.code()}, {"message", e.what()}};
    } catch (const std::exception& e) {
        resp.status = 500;
        resp.body = ordered_json{{"code", "internal_error"}, {"message", e.what()}};
    }
    return resp;
}

void serve(ReviewService& service, const std::string& host, int port) {
    httplib::Server server;
    auto bridge = [&service](const httplib::Request& req, httplib::Response& res) {
        Request r;
        r.method = req.method;
        r.path = req.path;
        for (const auto& [k, v] : req.params) r.query.emplace(k, v);
        for (const auto& [k, v] : req.headers) r.headers[util::lower(k)] = v;
        r.body = req.body;
        const auto out = service.handle(r);
        res.status = out.status;
        res.set_content(out.body.dump(), "application/json; charset=utf-8");
    };
    server.Get(".*", bridge);
    server.Post(".*", bridge);
    if (!server.listen(host, port)) throw IoError("could not listen on " + host + ":" + std::to_string(port));
}

}  // namespace vulnlens::service
