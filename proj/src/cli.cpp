#include "vulnlens/cli.hpp"

#include <algorithm>
#include <chrono>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <yaml-cpp/yaml.h>

#include "vulnlens/analytics.hpp"
#include "vulnlens/corpus.hpp"
#include "vulnlens/error.hpp"
#include "vulnlens/service.hpp"
#include "vulnlens/util/csv.hpp"
#include "vulnlens/util/files.hpp"
#include "vulnlens/util/random.hpp"

#ifndef VULNLENS_DATA_DIR
#define VULNLENS_DATA_DIR "data"
#endif

namespace vulnlens::cli {

namespace fs = std::filesystem;
using codebook::VulnerabilityId;
using nlohmann::json;
using nlohmann::ordered_json;
using service::Workspace;

namespace {

constexpr const char* kCodeVersion = "0.1.0";
constexpr std::string_view kVariantRunPrefix = "cf__";

class PartialFailure : public Error {
public:
    explicit PartialFailure(const std::string& message) : Error("partial_failure", message) {}
};

// ---------------------------------------------------------------------------
// YAML helpers

void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& where) {
    if (!node.IsMap()) throw ConfigError(where + " must be a mapping");
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T get(const YAML::Node& node, const std::string& key, const std::string& where, T fallback) {
    const auto child = node[key];
    if (!child) return fallback;
    try {
        return child.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

codebook::PromptStrategy strategy_of(const YAML::Node& node, const std::string& where) {
    const auto s = get<std::string>(node, "strategy", where, "custom");
    auto parsed = codebook::parse_strategy(s);
    if (!parsed) throw ConfigError(where + ".strategy: unknown strategy '" + s + "'");
    return *parsed;
}

std::vector<ConfigurationSpec> parse_specs(const YAML::Node& list, const std::string& where,
                                           const std::map<std::string, gateway::ProviderConfig>& providers) {
    std::vector<ConfigurationSpec> out;
    if (!list) return out;
    if (!list.IsSequence()) throw ConfigError(where + " must be a list");
    for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string here = where + "[" + std::to_string(i) + "]";
        const auto node = list[i];
        check_keys(node, {"provider", "strategy", "vulnerabilities"}, here);
        ConfigurationSpec spec;
        spec.provider = get<std::string>(node, "provider", here, "");
        if (!providers.count(spec.provider)) throw ConfigError(here + ".provider: unknown provider '" + spec.provider + "'");
        spec.strategy = strategy_of(node, here);
        const auto vulns = node["vulnerabilities"];
        if (!vulns) {
            spec.vulnerabilities.assign(codebook::kAllVulnerabilities.begin(), codebook::kAllVulnerabilities.end());
        } else {
            if (!vulns.IsSequence()) throw ConfigError(here + ".vulnerabilities must be a list");
            for (const auto& v : vulns) {
                const auto name = v.as<std::string>();
                auto id = codebook::parse_vulnerability(name);
                if (!id) throw ConfigError(here + ".vulnerabilities: unknown vulnerability '" + name + "'");
                spec.vulnerabilities.push_back(*id);
            }
        }
        out.push_back(std::move(spec));
    }
    return out;
}

gateway::ProviderConfig parse_provider(const std::string& name, const YAML::Node& node) {
    const std::string where = "providers." + name;
    check_keys(node,
               {"endpoint", "model", "temperature", "max_output_tokens", "requests_per_minute", "max_concurrent",
                "auth_env", "pin_cache", "meta"},
               where);
    gateway::ProviderConfig p;
    p.name = name;
    p.endpoint = get<std::string>(node, "endpoint", where, "");
    p.model_name = get<std::string>(node, "model", where, "");
    if (node["temperature"]) p.temperature = get<double>(node, "temperature", where, 0.0);
    p.max_output_tokens = get<int>(node, "max_output_tokens", where, p.max_output_tokens);
    p.requests_per_minute = get<int>(node, "requests_per_minute", where, p.requests_per_minute);
    p.max_concurrent = get<int>(node, "max_concurrent", where, p.max_concurrent);
    p.auth_ref = get<std::string>(node, "auth_env", where, "");
    p.pin_cache = get<bool>(node, "pin_cache", where, false);
    if (const auto meta = node["meta"]) {
        if (!meta.IsMap()) throw ConfigError(where + ".meta must be a mapping");
        for (const auto& kv : meta) p.meta[kv.first.as<std::string>()] = kv.second.as<std::string>();
    }
    if (p.endpoint.empty()) throw ConfigError(where + ".endpoint is required");
    if (p.model_name.empty()) throw ConfigError(where + ".model is required");
    return p;
}

}  // namespace

fs::path default_data_dir() { return fs::path(VULNLENS_DATA_DIR); }

AppConfig parse_config(const std::string& yaml_text, const fs::path& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    check_keys(root,
               {"seed", "out_dir", "corpus", "codebook", "k", "consensus_rule", "providers", "configurations",
                "sampling", "analytics", "counterfactual", "bias", "review"},
               "config");

    AppConfig c;
    c.base_dir = base_dir;
    c.seed = get<std::uint64_t>(root, "seed", "config", 0);
    c.out_dir = resolve(base_dir, get<std::string>(root, "out_dir", "config", "out"));
    c.k = get<int>(root, "k", "config", c.k);
    if (c.k < 1) throw ConfigError("config.k must be >= 1");
    const auto rule = get<std::string>(root, "consensus_rule", "config", "plurality");
    if (rule == "plurality") {
        c.consensus_rule = labeling::ConsensusRule::plurality;
    } else if (rule == "strict_majority") {
        c.consensus_rule = labeling::ConsensusRule::strict_majority;
    } else {
        throw ConfigError("config.consensus_rule: expected plurality or strict_majority");
    }

    if (const auto corpus = root["corpus"]) {
        check_keys(corpus, {"source", "text_column"}, "corpus");
        const auto source = get<std::string>(corpus, "source", "corpus", "");
        const bool url = source.rfind("http://", 0) == 0 || source.rfind("https://", 0) == 0;
        c.corpus_source = url ? source : resolve(base_dir, source).string();
        c.text_column = get<std::string>(corpus, "text_column", "corpus", c.text_column);
    }
    const auto cb = get<std::string>(root, "codebook", "config", "");
    c.codebook_path = cb.empty() ? default_data_dir() / "codebook.yaml" : resolve(base_dir, cb);

    if (const auto providers = root["providers"]) {
        if (!providers.IsMap()) throw ConfigError("providers must be a mapping");
        for (const auto& kv : providers) {
            const auto name = kv.first.as<std::string>();
            c.providers[name] = parse_provider(name, kv.second);
        }
    }
    c.configurations = parse_specs(root["configurations"], "configurations", c.providers);

    if (!c.configurations.empty()) {
        c.reference_provider = c.configurations.front().provider;
        c.reference_strategy = c.configurations.front().strategy;
    }
    if (const auto sampling = root["sampling"]) {
        check_keys(sampling, {"reference", "targets"}, "sampling");
        if (const auto ref = sampling["reference"]) {
            check_keys(ref, {"provider", "strategy"}, "sampling.reference");
            c.reference_provider = get<std::string>(ref, "provider", "sampling.reference", c.reference_provider);
            c.reference_strategy = strategy_of(ref, "sampling.reference");
        }
        if (const auto t = sampling["targets"]) {
            check_keys(t, {"negative", "positive", "inconclusive"}, "sampling.targets");
            c.sample_targets.negative = get<int>(t, "negative", "sampling.targets", c.sample_targets.negative);
            c.sample_targets.positive = get<int>(t, "positive", "sampling.targets", c.sample_targets.positive);
            c.sample_targets.inconclusive =
                get<int>(t, "inconclusive", "sampling.targets", c.sample_targets.inconclusive);
        }
    }
    if (!c.reference_provider.empty() && !c.providers.count(c.reference_provider)) {
        throw ConfigError("sampling.reference.provider: unknown provider '" + c.reference_provider + "'");
    }

    if (const auto a = root["analytics"]) {
        check_keys(a, {"n_boot"}, "analytics");
        c.n_boot = get<int>(a, "n_boot", "analytics", c.n_boot);
        if (c.n_boot < 1) throw ConfigError("analytics.n_boot must be >= 1");
    }

    if (const auto cf = root["counterfactual"]) {
        check_keys(cf, {"target", "rewriter", "validation", "configurations"}, "counterfactual");
        c.cf_target = get<int>(cf, "target", "counterfactual", c.cf_target);
        c.cf_rewriter = get<std::string>(cf, "rewriter", "counterfactual", "");
        if (!c.cf_rewriter.empty() && !c.providers.count(c.cf_rewriter)) {
            throw ConfigError("counterfactual.rewriter: unknown provider '" + c.cf_rewriter + "'");
        }
        if (const auto v = cf["validation"]) {
            check_keys(v, {"min_length_ratio", "max_length_ratio", "min_similarity"}, "counterfactual.validation");
            auto& vc = c.cf_validation;
            vc.min_length_ratio = get<double>(v, "min_length_ratio", "counterfactual.validation", vc.min_length_ratio);
            vc.max_length_ratio = get<double>(v, "max_length_ratio", "counterfactual.validation", vc.max_length_ratio);
            vc.min_similarity = get<double>(v, "min_similarity", "counterfactual.validation", vc.min_similarity);
        }
        c.cf_configurations = parse_specs(cf["configurations"], "counterfactual.configurations", c.providers);
    }

    if (const auto b = root["bias"]) {
        check_keys(b, {"outcome_mode"}, "bias");
        const auto mode = get<std::string>(b, "outcome_mode", "bias", "per_iteration");
        auto m = biasstats::parse_outcome_mode(mode);
        if (!m) throw ConfigError("bias.outcome_mode: unknown mode '" + mode + "'");
        c.outcome_mode = *m;
    }

    if (const auto r = root["review"]) {
        check_keys(r, {"agreement_threshold", "page_size", "tokens_file", "host", "port"}, "review");
        c.agreement_threshold = get<int>(r, "agreement_threshold", "review", c.agreement_threshold);
        c.page_size = get<int>(r, "page_size", "review", c.page_size);
        c.tokens_file = resolve(base_dir, get<std::string>(r, "tokens_file", "review", ""));
        c.host = get<std::string>(r, "host", "review", c.host);
        c.port = get<int>(r, "port", "review", c.port);
    }
    return c;
}

AppConfig load_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse_config(util::read_file(path), fs::absolute(path).parent_path());
}

namespace {

// ---------------------------------------------------------------------------
// Command context

struct Context {
    AppConfig cfg;
    Workspace ws;
    std::uint64_t seed = 0;
    bool stub = false;
    bool dry_run = false;
    std::optional<std::string> run_filter;
    std::vector<std::string> approve;
    std::ostream* out = nullptr;
    std::ostream* err = nullptr;

    std::unique_ptr<util::Clock> clock;
    std::optional<codebook::Codebook> codebook_cache;

    const codebook::Codebook& codebook() {
        if (!codebook_cache) codebook_cache = codebook::load_codebook(cfg.codebook_path);
        return *codebook_cache;
    }

    gateway::ProviderConfig provider(const std::string& name) const {
        auto it = cfg.providers.find(name);
        if (it == cfg.providers.end()) throw ConfigError("unknown provider '" + name + "'");
        auto p = it->second;
        if (stub) {
            p.endpoint = std::string(gateway::kStubEndpoint);
            p.meta["seed"] = std::to_string(seed);
        }
        p.validate();
        return p;
    }

    labeling::RunOptions run_options() const {
        labeling::RunOptions o;
        o.clock = clock.get();
        o.code_version = kCodeVersion;
        return o;
    }

    std::unique_ptr<gateway::Gateway> make_gateway(std::shared_ptr<gateway::ChatProvider> stub_side) const {
        gateway::GatewayOptions opts;
        opts.cache_path = ws.cache();
        // Stub runs skip real waiting: the throttle still orders requests but
        // time advances on a simulated clock.
        if (stub) opts.clock = std::make_shared<gateway::FakeClock>();
        auto live = std::make_shared<gateway::ChatCompletionsProvider>(std::make_shared<gateway::HttplibTransport>());
        return std::make_unique<gateway::Gateway>(std::make_shared<gateway::RoutingProvider>(stub_side, live), opts);
    }

    std::ostream& o() { return *out; }
};

bool is_variant_run(const std::string& id) { return id.rfind(kVariantRunPrefix, 0) == 0; }

std::vector<corpus::Narrative> require_corpus(const Context& ctx) {
    if (!fs::exists(ctx.ws.corpus())) {
        throw PreconditionError("corpus store " + ctx.ws.corpus().string() + " is missing; run clean first");
    }
    return corpus::load_corpus(ctx.ws.corpus());
}

std::vector<labeling::LabelingConfig> labeling_configs(const Context& ctx, const std::vector<ConfigurationSpec>& specs,
                                                       bool variant) {
    std::vector<labeling::LabelingConfig> out;
    for (const auto& spec : specs) {
        for (auto v : spec.vulnerabilities) {
            auto lc = labeling::make_config(ctx.provider(spec.provider), spec.strategy, v, ctx.cfg.k, ctx.seed);
            if (variant) lc.config_id = std::string(kVariantRunPrefix) + lc.config_id;
            out.push_back(std::move(lc));
        }
    }
    return out;
}

std::size_t records_on_disk(const Workspace& ws, const std::string& config_id) {
    return util::read_jsonl(labeling::run_dir(ws.runs(), config_id) / "records.jsonl").size();
}

void print_plan(Context& ctx, std::size_t requests) {
    ctx.o() << "planned requests: " << requests << "\n";
    ctx.o() << "max completion calls: " << requests * (1 + gateway::kMaxReformatRounds) << "\n";
    ctx.o() << "network calls made: 0\n";
}

void write_json(const fs::path& path, const ordered_json& j) { util::write_atomic(path, j.dump(2) + "\n"); }

void write_long_report(const Workspace& ws, const std::string& name, const std::vector<analytics::LongRow>& rows) {
    util::write_atomic(ws.reports() / (name + ".csv"), analytics::long_csv(rows));
    write_json(ws.reports() / (name + ".json"), analytics::long_json(rows));
}

std::vector<std::string> selected_runs(const Context& ctx, bool variants) {
    const auto ids = labeling::list_runs(ctx.ws.runs());
    if (ctx.run_filter) {
        if (std::find(ids.begin(), ids.end(), *ctx.run_filter) == ids.end()) {
            throw NotFoundError("unknown run " + *ctx.run_filter);
        }
        return {*ctx.run_filter};
    }
    std::vector<std::string> out;
    for (const auto& id : ids)
        if (is_variant_run(id) == variants) out.push_back(id);
    return out;
}

labeling::Run open_run(const Context& ctx, const std::string& id) {
    return labeling::load_run(labeling::run_dir(ctx.ws.runs(), id));
}

// ---------------------------------------------------------------------------
// Corpus

int cmd_ingest(Context& ctx) {
    if (ctx.cfg.corpus_source.empty()) throw ConfigError("corpus.source is not set");
    if (ctx.dry_run) {
        ctx.o() << "planned fetches: 1 (" << ctx.cfg.corpus_source << ")\n";
        return 0;
    }
    const auto result = corpus::ingest_raw(ctx.cfg.corpus_source, ctx.cfg.text_column);
    corpus::save_raw(ctx.ws.raw(), result.records);
    ctx.o() << "ingested " << result.records.size() << " records (" << result.skipped_blank << " blank skipped)\n";
    return 0;
}

int cmd_clean(Context& ctx) {
    if (!fs::exists(ctx.ws.raw())) throw PreconditionError("raw store " + ctx.ws.raw().string() + " is missing; run ingest first");
    const auto raw = corpus::load_raw(ctx.ws.raw());
    const auto c = corpus::build_corpus(raw);
    if (ctx.dry_run) {
        ctx.o() << "would keep " << c.stats.kept << " of " << c.stats.ingested << " narratives\n";
        return 0;
    }
    corpus::save_corpus(ctx.ws.corpus(), c.narratives);
    ordered_json stats;
    stats["ingested"] = c.stats.ingested;
    stats["dropped_short"] = c.stats.dropped_short;
    stats["dropped_duplicate"] = c.stats.dropped_duplicate;
    stats["kept"] = c.stats.kept;
    write_json(ctx.ws.corpus_stats(), stats);
    ctx.o() << "kept " << c.stats.kept << " narratives (" << c.stats.dropped_short << " short, "
            << c.stats.dropped_duplicate << " duplicate)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Labelling and consensus

int cmd_label(Context& ctx) {
    const auto narratives = require_corpus(ctx);
    const auto targets = labeling::targets_from(narratives);
    auto configs = labeling_configs(ctx, ctx.cfg.configurations, false);
    if (ctx.run_filter) {
        configs.erase(std::remove_if(configs.begin(), configs.end(),
                                     [&](const auto& c) { return c.config_id != *ctx.run_filter; }),
                      configs.end());
        if (configs.empty()) throw NotFoundError("no configuration produces run " + *ctx.run_filter);
    }
    if (configs.empty()) throw ConfigError("no labelling configurations defined");

    if (ctx.dry_run) {
        std::size_t total = 0;
        for (const auto& c : configs) {
            const std::size_t want = targets.size() * static_cast<std::size_t>(c.k);
            const std::size_t have = std::min(want, records_on_disk(ctx.ws, c.config_id));
            ctx.o() << c.config_id << ": " << (want - have) << " requests\n";
            total += want - have;
        }
        print_plan(ctx, total);
        return 0;
    }

    auto gw = ctx.make_gateway(std::make_shared<gateway::StubProvider>());
    std::size_t missing = 0;
    for (const auto& c : configs) {
        const auto prompt = codebook::render_prompt(ctx.codebook().at(c.vulnerability), c.strategy);
        const auto report = labeling::run_labeling(targets, c, prompt, *gw, ctx.ws.runs(), ctx.run_options());
        ctx.o() << c.config_id << ": " << report.new_requests << " new, " << report.already_present
                << " present, " << report.parse_missing << " parse-missing, " << report.transport_missing
                << " transport-missing\n";
        missing += report.transport_missing;
    }
    if (missing > 0) {
        throw PartialFailure(std::to_string(missing) + " records failed transport and were stored as Missing");
    }
    return 0;
}

int cmd_consensus(Context& ctx) {
    const auto ids = ctx.run_filter ? selected_runs(ctx, false) : labeling::list_runs(ctx.ws.runs());
    if (ids.empty()) throw PreconditionError("no runs under " + ctx.ws.runs().string());
    std::string csv = util::csv_row({"config", "vulnerability", "narrative_id", "negative", "inconclusive",
                                     "positive", "missing", "consensus", "agreement_level", "unanimous",
                                     "tie_broken"});
    ordered_json arr = ordered_json::array();
    for (const auto& id : ids) {
        const auto run = open_run(ctx, id);
        const std::string v(codebook::to_string(run.config.vulnerability));
        for (const auto& s : labeling::summarize_run(run, ctx.cfg.consensus_rule)) {
            const auto& c = s.consensus;
            csv += util::csv_row({id, v, s.narrative_id, std::to_string(s.votes.counts[0]),
                                  std::to_string(s.votes.counts[1]), std::to_string(s.votes.counts[2]),
                                  std::to_string(s.votes.n_missing), std::string(labeling::to_string(c.outcome)),
                                  std::to_string(c.agreement_level), c.unanimous ? "true" : "false",
                                  c.tie_broken ? "true" : "false"});
            ordered_json j;
            j["config"] = id;
            j["vulnerability"] = v;
            j["narrative_id"] = s.narrative_id;
            j["negative"] = s.votes.counts[0];
            j["inconclusive"] = s.votes.counts[1];
            j["positive"] = s.votes.counts[2];
            j["missing"] = s.votes.n_missing;
            j["consensus"] = labeling::to_string(c.outcome);
            j["agreement_level"] = c.agreement_level;
            j["unanimous"] = c.unanimous;
            j["tie_broken"] = c.tie_broken;
            arr.push_back(std::move(j));
        }
    }
    if (ctx.dry_run) {
        ctx.o() << "would write " << arr.size() << " consensus rows\n";
        return 0;
    }
    util::write_atomic(ctx.ws.reports() / "consensus.csv", csv);
    write_json(ctx.ws.reports() / "consensus.json", arr);
    ctx.o() << "consensus rows: " << arr.size() << "\n";
    return 0;
}

// Reference consensus across the four vulnerabilities, in corpus order.
labeling::ReferenceLabels reference_labels(Context& ctx) {
    if (ctx.cfg.reference_provider.empty()) throw ConfigError("no reference configuration for sampling");
    const auto narratives = require_corpus(ctx);
    std::map<VulnerabilityId, std::map<std::string, labeling::LabelOutcome>> per_v;
    for (auto v : codebook::kAllVulnerabilities) {
        const auto lc = labeling::make_config(ctx.provider(ctx.cfg.reference_provider), ctx.cfg.reference_strategy, v,
                                              ctx.cfg.k, ctx.seed);
        const auto dir = labeling::run_dir(ctx.ws.runs(), lc.config_id);
        if (!fs::exists(dir / "manifest.json")) {
            throw PreconditionError("reference run " + lc.config_id + " is missing; run label first");
        }
        for (const auto& s : labeling::summarize_run(labeling::load_run(dir), ctx.cfg.consensus_rule)) {
            per_v[v][s.narrative_id] = s.consensus.outcome;
        }
    }
    labeling::ReferenceLabels out;
    for (const auto& n : narratives) {
        std::map<VulnerabilityId, labeling::LabelOutcome> row;
        for (auto& [v, m] : per_v) {
            auto it = m.find(n.id);
            if (it != m.end()) row[v] = it->second;
        }
        if (!row.empty()) out.emplace_back(n.id, std::move(row));
    }
    return out;
}

int cmd_sample(Context& ctx) {
    const auto reference = reference_labels(ctx);
    const auto sample = labeling::sample_evaluation_set(reference, ctx.cfg.sample_targets,
                                                        util::derive_seed(ctx.seed, "evaluation-sample"));
    ordered_json j;
    j["seed"] = ctx.seed;
    j["narrative_ids"] = sample.narrative_ids;
    ordered_json strata = ordered_json::array();
    for (const auto& s : sample.strata) {
        ordered_json e;
        e["vulnerability"] = codebook::to_string(s.vulnerability);
        e["label"] = labeling::to_string(s.label);
        e["target"] = s.target;
        e["narrative_ids"] = s.narrative_ids;
        strata.push_back(std::move(e));
    }
    j["strata"] = strata;
    if (ctx.dry_run) {
        ctx.o() << "would sample " << sample.narrative_ids.size() << " narratives\n";
        return 0;
    }
    write_json(ctx.ws.sample(), j);
    ctx.o() << "evaluation sample: " << sample.narrative_ids.size() << " narratives\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Analytics

struct EvaluationInputs {
    std::map<VulnerabilityId, std::vector<std::string>> ids;
    analytics::HumanLabels human;
};

EvaluationInputs evaluation_inputs(const Context& ctx) {
    if (!fs::exists(ctx.ws.human_labels())) {
        throw IntegrityError("human label store " + ctx.ws.human_labels().string() +
                             " is missing; metrics need adjudicated human labels");
    }
    if (!fs::exists(ctx.ws.sample())) {
        throw IntegrityError("evaluation sample store " + ctx.ws.sample().string() + " is missing; run sample first");
    }
    EvaluationInputs in;
    const auto j = json::parse(util::read_file(ctx.ws.sample()));
    for (const auto& s : j.at("strata")) {
        const auto v = codebook::parse_vulnerability(s.at("vulnerability").get<std::string>());
        if (!v) throw IntegrityError(ctx.ws.sample().string() + ": unknown vulnerability");
        auto& ids = in.ids[*v];
        for (const auto& id : s.at("narrative_ids")) ids.push_back(id.get<std::string>());
    }
    for (auto& [v, ids] : in.ids) {
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }
    labeling::HumanLabelStore store(ctx.ws.human_labels());
    in.human = analytics::human_labels_from(store);
    return in;
}

int cmd_metrics(Context& ctx) {
    const auto in = evaluation_inputs(ctx);
    std::vector<analytics::AlignmentRow> rows;
    for (const auto& id : selected_runs(ctx, false)) {
        const auto view = analytics::view_of(open_run(ctx, id), ctx.cfg.consensus_rule);
        auto it = in.ids.find(view.vulnerability);
        if (it == in.ids.end()) continue;
        rows.push_back(analytics::alignment_report(view, in.human, it->second));
    }
    if (ctx.dry_run) {
        ctx.o() << "would write metrics for " << rows.size() << " runs\n";
        return 0;
    }
    write_long_report(ctx.ws, "metrics", analytics::to_long(rows));
    for (const auto& r : rows) {
        ctx.o() << r.config_id << ": n=" << r.n << " mse=" << analytics::format_number(r.mse)
                << " f1=" << analytics::format_number(r.prf.f1) << "\n";
    }
    return 0;
}

int cmd_entropy(Context& ctx) {
    const auto in = evaluation_inputs(ctx);
    std::vector<analytics::EntropyStratumRow> rows;
    for (const auto& id : selected_runs(ctx, false)) {
        const auto view = analytics::view_of(open_run(ctx, id), ctx.cfg.consensus_rule);
        auto it = in.ids.find(view.vulnerability);
        if (it == in.ids.end()) continue;
        auto part = analytics::entropy_strata_report(view, in.human, it->second, ctx.cfg.n_boot,
                                                     util::derive_seed(ctx.seed, "entropy"));
        rows.insert(rows.end(), part.begin(), part.end());
    }
    if (ctx.dry_run) {
        ctx.o() << "would write " << rows.size() << " entropy strata\n";
        return 0;
    }
    write_long_report(ctx.ws, "entropy", analytics::to_long(rows));
    ctx.o() << "entropy strata: " << rows.size() << "\n";
    return 0;
}

int cmd_curves(Context& ctx) {
    const auto in = evaluation_inputs(ctx);
    std::vector<analytics::AgreementCurve> curves;
    for (const auto& id : selected_runs(ctx, false)) {
        const auto view = analytics::view_of(open_run(ctx, id), ctx.cfg.consensus_rule);
        auto it = in.ids.find(view.vulnerability);
        if (it == in.ids.end()) continue;
        curves.push_back(analytics::agreement_alignment_curve(view, in.human, it->second));
    }
    if (ctx.dry_run) {
        ctx.o() << "would write " << curves.size() << " curves\n";
        return 0;
    }
    write_long_report(ctx.ws, "curves", analytics::to_long(curves));
    ctx.o() << "curves: " << curves.size() << "\n";
    return 0;
}

int cmd_tables(Context& ctx) {
    std::vector<analytics::RunView> views;
    for (const auto& id : selected_runs(ctx, false)) views.push_back(analytics::view_of(open_run(ctx, id), ctx.cfg.consensus_rule));
    if (views.empty()) throw PreconditionError("no runs under " + ctx.ws.runs().string());
    const auto rows = analytics::distribution_report(views);
    const auto table = analytics::format_distribution_table(rows);
    ctx.o() << table;
    if (ctx.dry_run) return 0;
    write_long_report(ctx.ws, "distribution", analytics::to_long(rows));
    util::write_atomic(ctx.ws.reports() / "tables.txt", table);
    return 0;
}

// ---------------------------------------------------------------------------
// Counterfactuals

ordered_json candidate_json(const counterfactual::Candidate& c) {
    ordered_json j;
    j["narrative_id"] = c.narrative_id;
    j["vulnerability"] = codebook::to_string(c.vulnerability);
    j["reference"] = labeling::to_string(c.reference);
    j["replaces"] = c.replaces ? ordered_json(*c.replaces) : ordered_json(nullptr);
    return j;
}

std::map<std::string, VulnerabilityId> load_candidate_vulnerabilities(const Workspace& ws) {
    if (!fs::exists(ws.candidates())) {
        throw PreconditionError("candidate store " + ws.candidates().string() + " is missing; run cf-select first");
    }
    std::map<std::string, VulnerabilityId> out;
    for (const auto& c : json::parse(util::read_file(ws.candidates()))) {
        const auto v = codebook::parse_vulnerability(c.at("vulnerability").get<std::string>());
        if (!v) throw IntegrityError(ws.candidates().string() + ": unknown vulnerability");
        out[c.at("narrative_id").get<std::string>()] = *v;
    }
    return out;
}

int cmd_cf_select(Context& ctx) {
    const auto reference = reference_labels(ctx);
    std::vector<counterfactual::WorksheetRow> existing;
    std::set<std::string> rejected;
    if (fs::exists(ctx.ws.worksheet())) {
        existing = counterfactual::parse_worksheet(util::read_file(ctx.ws.worksheet()));
        rejected = counterfactual::read_annotations(existing).rejected;
    }
    const auto candidates = counterfactual::select_counterfactual_bases(
        reference, ctx.cfg.cf_target, util::derive_seed(ctx.seed, "counterfactual-bases"), rejected);

    // Keep filled rows and rejections; add rows for new candidates.
    std::set<std::string> wanted;
    for (const auto& c : candidates) wanted.insert(c.narrative_id);
    std::vector<counterfactual::WorksheetRow> rows;
    std::set<std::string> present;
    for (const auto& r : existing) {
        if (wanted.count(r.narrative_id) || rejected.count(r.narrative_id)) {
            rows.push_back(r);
            present.insert(r.narrative_id);
        }
    }
    for (const auto& r : counterfactual::worksheet_for(candidates))
        if (!present.count(r.narrative_id)) rows.push_back(r);

    ordered_json arr = ordered_json::array();
    for (const auto& c : candidates) arr.push_back(candidate_json(c));
    if (ctx.dry_run) {
        ctx.o() << "would select " << candidates.size() << " bases\n";
        return 0;
    }
    write_json(ctx.ws.candidates(), arr);
    util::write_atomic(ctx.ws.worksheet(), counterfactual::worksheet_csv(rows));
    ctx.o() << "selected " << candidates.size() << " bases; worksheet " << ctx.ws.worksheet().string() << "\n";
    return 0;
}

constexpr std::size_t kGridCells = counterfactual::kAllSexes.size() * counterfactual::kAllRaces.size();

int cmd_cf_generate(Context& ctx) {
    if (!fs::exists(ctx.ws.worksheet())) {
        throw PreconditionError("worksheet " + ctx.ws.worksheet().string() + " is missing; run cf-select first");
    }
    const auto contents = counterfactual::read_annotations(
        counterfactual::parse_worksheet(util::read_file(ctx.ws.worksheet())));
    if (!contents.pending.empty()) {
        *ctx.err << "warning: " << contents.pending.size() << " worksheet rows are not annotated yet\n";
    }
    std::map<std::string, corpus::Narrative> by_id;
    for (auto& n : require_corpus(ctx)) by_id.emplace(n.id, std::move(n));

    std::map<std::string, std::vector<counterfactual::VariantNarrative>> existing;
    if (fs::exists(ctx.ws.variants())) {
        for (auto& v : counterfactual::load_variants(ctx.ws.variants())) existing[v.base_id].push_back(std::move(v));
    }
    std::vector<const counterfactual::SubjectAnnotation*> todo;
    for (const auto& a : contents.annotations) {
        if (!by_id.count(a.narrative_id)) throw IntegrityError("annotated narrative " + a.narrative_id + " is not in the corpus");
        auto it = existing.find(a.narrative_id);
        if (it == existing.end() || it->second.size() != kGridCells) todo.push_back(&a);
    }
    if (ctx.dry_run) {
        ctx.o() << "bases to rewrite: " << todo.size() << "\n";
        print_plan(ctx, todo.size() * (kGridCells - 1));
        return 0;
    }
    if (ctx.cfg.cf_rewriter.empty()) throw ConfigError("counterfactual.rewriter is not set");
    const auto rewriter = ctx.provider(ctx.cfg.cf_rewriter);
    auto gw = ctx.make_gateway(std::make_shared<counterfactual::StubRewriter>());

    std::vector<std::string> failures;
    for (const auto* a : todo) {
        const auto& base = by_id.at(a->narrative_id);
        auto result = counterfactual::generate_variants(base, *a, *gw, rewriter,
                                                        util::derive_seed(ctx.seed, "rewrite|" + base.id));
        for (auto& v : result.variants) counterfactual::apply_validation(base, v, ctx.cfg.cf_validation);
        for (const auto& f : result.failed) {
            failures.push_back(counterfactual::variant_id(base.id, f.sex, f.race) + ": " + f.error);
        }
        existing[base.id] = std::move(result.variants);
    }

    std::vector<counterfactual::VariantNarrative> all;
    for (const auto& a : contents.annotations) {
        auto it = existing.find(a.narrative_id);
        if (it != existing.end()) all.insert(all.end(), it->second.begin(), it->second.end());
    }
    counterfactual::save_variants(ctx.ws.variants(), all);
    std::size_t passed = 0;
    for (const auto& v : all) passed += v.validated ? 1 : 0;
    ctx.o() << "variants: " << all.size() << " (" << passed << " validated)\n";
    if (!failures.empty()) {
        std::string msg = std::to_string(failures.size()) + " rewrites failed; rerun cf-generate to retry:";
        for (const auto& f : failures) msg += " " + f + ";";
        throw PartialFailure(msg);
    }
    return 0;
}

int cmd_cf_validate(Context& ctx) {
    if (!fs::exists(ctx.ws.variants())) {
        throw PreconditionError("variant store " + ctx.ws.variants().string() + " is missing; run cf-generate first");
    }
    std::map<std::string, corpus::Narrative> by_id;
    for (auto& n : require_corpus(ctx)) by_id.emplace(n.id, std::move(n));
    auto variants = counterfactual::load_variants(ctx.ws.variants());
    std::size_t passed = 0;
    for (auto& v : variants) {
        auto it = by_id.find(v.base_id);
        if (it == by_id.end()) throw IntegrityError("variant base " + v.base_id + " is not in the corpus");
        counterfactual::apply_validation(it->second, v, ctx.cfg.cf_validation);
        passed += v.validated ? 1 : 0;
    }
    ctx.o() << "validated " << passed << " of " << variants.size() << " variants\n";
    if (!ctx.dry_run) counterfactual::save_variants(ctx.ws.variants(), variants);
    return 0;
}

int cmd_cf_label(Context& ctx) {
    if (!fs::exists(ctx.ws.variants())) {
        throw PreconditionError("variant store " + ctx.ws.variants().string() + " is missing; run cf-generate first");
    }
    const auto variants = counterfactual::load_variants(ctx.ws.variants());
    const auto base_vuln = load_candidate_vulnerabilities(ctx.ws);
    const std::set<std::string> approved(ctx.approve.begin(), ctx.approve.end());
    auto configs = labeling_configs(ctx, ctx.cfg.cf_configurations, true);
    if (configs.empty()) throw ConfigError("counterfactual.configurations is empty");

    auto gw = ctx.dry_run ? nullptr : ctx.make_gateway(std::make_shared<gateway::StubProvider>());
    std::size_t planned = 0;
    for (const auto& c : configs) {
        std::vector<counterfactual::VariantNarrative> subset;
        std::size_t eligible = 0;
        for (const auto& v : variants) {
            auto it = base_vuln.find(v.base_id);
            if (it == base_vuln.end() || it->second != c.vulnerability) continue;
            subset.push_back(v);
            if (v.validated || approved.count(counterfactual::variant_id(v.base_id, v.sex, v.race))) ++eligible;
        }
        if (ctx.dry_run) {
            const std::size_t want = eligible * static_cast<std::size_t>(c.k);
            const std::size_t have = std::min(want, records_on_disk(ctx.ws, c.config_id));
            ctx.o() << c.config_id << ": " << (want - have) << " requests\n";
            planned += want - have;
            continue;
        }
        if (subset.empty()) continue;
        const auto prompt = codebook::render_prompt(ctx.codebook().at(c.vulnerability), c.strategy);
        const auto report = counterfactual::label_variants(subset, {{c, prompt}}, *gw, ctx.ws.runs(), approved,
                                                           ctx.run_options());
        ctx.o() << c.config_id << ": " << report.labelled_variants << " variants labelled, "
                << report.excluded_unvalidated << " excluded as unvalidated\n";
    }
    if (ctx.dry_run) print_plan(ctx, planned);
    return 0;
}

// ---------------------------------------------------------------------------
// Bias statistics

ordered_json effect_json(const biasstats::MarginalEffect& e) {
    ordered_json j;
    j["factor"] = biasstats::to_string(e.factor);
    j["level"] = e.level;
    j["ame"] = e.ame;
    j["se"] = e.se;
    j["ci_low"] = e.ci_low;
    j["ci_high"] = e.ci_high;
    j["z"] = e.z;
    j["p"] = e.p;
    return j;
}

biasstats::MarginalEffect effect_from_json(const json& j) {
    biasstats::MarginalEffect e;
    e.factor = j.at("factor").get<std::string>() == "sex" ? biasstats::Factor::sex : biasstats::Factor::race;
    e.level = j.at("level").get<std::string>();
    e.ame = j.at("ame").get<double>();
    e.se = j.at("se").get<double>();
    e.ci_low = j.at("ci_low").get<double>();
    e.ci_high = j.at("ci_high").get<double>();
    e.z = j.at("z").get<double>();
    e.p = j.at("p").get<double>();
    return e;
}

fs::path fit_path(const Workspace& ws, const std::string& run_id) { return ws.bias() / (run_id + ".fit.json"); }

void fit_run(Context& ctx, const std::string& id) {
    const auto run = open_run(ctx, id);
    const auto design = biasstats::build_design(run.records, run.config.k, ctx.cfg.outcome_mode);
    ordered_json j;
    j["config"] = id;
    j["vulnerability"] = codebook::to_string(run.config.vulnerability);
    j["outcome_mode"] = biasstats::to_string(ctx.cfg.outcome_mode);
    j["n_obs"] = design.n_obs();
    j["n_groups"] = design.n_groups();
    j["dropped_missing"] = design.dropped_missing;
    j["warnings"] = design.warnings;
    ordered_json effects = ordered_json::array();
    try {
        const auto fit = biasstats::fit_glmm(design);
        j["status"] = fit.converged ? "converged" : "not_converged";
        j["fit"] = biasstats::diagnostics_json(fit);
        if (fit.converged) {
            for (const auto& e : biasstats::average_marginal_effects(fit, design)) effects.push_back(effect_json(e));
        } else {
            *ctx.err << "warning: " << id << ": mixed model did not converge; no effects reported\n";
        }
    } catch (const PreconditionError& e) {
        j["status"] = "skipped";
        j["reason"] = e.what();
        *ctx.err << "warning: " << id << ": " << e.what() << "\n";
    }
    j["effects"] = effects;
    write_json(fit_path(ctx.ws, id), j);
    ctx.o() << id << ": " << j["status"].get<std::string>() << "\n";
}

int cmd_bias_fit(Context& ctx) {
    const auto ids = selected_runs(ctx, true);
    if (ids.empty()) throw PreconditionError("no counterfactual runs; run cf-label first");
    if (ctx.dry_run) {
        ctx.o() << "would fit " << ids.size() << " models\n";
        return 0;
    }
    for (const auto& id : ids) fit_run(ctx, id);
    return 0;
}

int cmd_bias_report(Context& ctx) {
    const auto ids = selected_runs(ctx, true);
    if (ids.empty()) throw PreconditionError("no counterfactual runs; run cf-label first");
    if (ctx.dry_run) {
        ctx.o() << "would report on " << ids.size() << " runs\n";
        return 0;
    }
    std::vector<biasstats::EffectSet> sets;
    for (const auto& id : ids) {
        if (!fs::exists(fit_path(ctx.ws, id))) fit_run(ctx, id);
        const auto j = json::parse(util::read_file(fit_path(ctx.ws, id)));
        biasstats::EffectSet set;
        set.config_id = id;
        set.vulnerability = *codebook::parse_vulnerability(j.at("vulnerability").get<std::string>());
        for (const auto& e : j.at("effects")) set.effects.push_back(effect_from_json(e));
        sets.push_back(std::move(set));
    }
    const auto rows = biasstats::bias_report(sets);
    util::write_atomic(ctx.ws.bias() / "effects.csv", biasstats::bias_csv(rows));
    write_json(ctx.ws.bias() / "effects.json", biasstats::bias_json(rows));
    std::size_t significant = 0;
    for (const auto& r : rows) significant += r.significant ? 1 : 0;
    ctx.o() << "effects: " << rows.size() << " (" << significant << " significant after Holm)\n";
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_serve(Context& ctx) {
    if (ctx.cfg.tokens_file.empty()) throw ConfigError("review.tokens_file is not set");
    auto tokens = service::load_tokens(ctx.cfg.tokens_file);
    if (ctx.dry_run) {
        ctx.o() << "would serve on " << ctx.cfg.host << ":" << ctx.cfg.port << "\n";
        return 0;
    }
    service::ServiceOptions opts;
    opts.agreement_threshold = ctx.cfg.agreement_threshold;
    opts.page_size = ctx.cfg.page_size;
    service::ReviewService svc(ctx.ws, std::move(tokens), opts);
    ctx.o() << "listening on http://" << ctx.cfg.host << ":" << ctx.cfg.port << "\n" << std::flush;
    service::serve(svc, ctx.cfg.host, ctx.cfg.port);
    return 0;
}

void print_error(std::ostream& err, const std::string& code, const std::string& message) {
    err << ordered_json{{"code", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Narrative vulnerability labelling workbench", "vulnlens"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool stub = false, dry_run = false;
    std::string out_dir;
    app.add_option("--config", config_path, "YAML run configuration");
    app.add_option("--seed", seed, "Seed for every random choice (overrides the config)");
    app.add_flag("--stub", stub, "Route every provider to the offline stub");
    app.add_flag("--dry-run", dry_run, "Print the work plan without side effects");
    app.add_option("--out-dir", out_dir, "Workspace directory (overrides the config)");

    std::string run_filter;
    std::vector<std::string> approve;
    using Handler = int (*)(Context&);
    const std::vector<std::tuple<std::string, std::string, Handler, bool>> commands = {
        {"ingest", "Read the raw CSV source", cmd_ingest, false},
        {"clean", "Clean and deduplicate into the corpus", cmd_clean, false},
        {"sample", "Draw the stratified evaluation sample", cmd_sample, false},
        {"label", "Classify the corpus k times per configuration", cmd_label, true},
        {"consensus", "Tally votes and consensus per run", cmd_consensus, true},
        {"metrics", "Alignment with adjudicated human labels", cmd_metrics, true},
        {"entropy", "Vote entropy with bootstrap intervals", cmd_entropy, true},
        {"curves", "Agreement level versus alignment", cmd_curves, true},
        {"tables", "Consensus label distribution tables", cmd_tables, true},
        {"cf-select", "Choose counterfactual bases and write the worksheet", cmd_cf_select, false},
        {"cf-generate", "Rewrite annotated bases across the sex x race grid", cmd_cf_generate, false},
        {"cf-validate", "Re-run variant validation", cmd_cf_validate, false},
        {"cf-label", "Classify validated variants", cmd_cf_label, false},
        {"bias-fit", "Fit the mixed model per counterfactual run", cmd_bias_fit, true},
        {"bias-report", "Marginal effects with Holm correction", cmd_bias_report, true},
        {"serve", "Start the review HTTP service", cmd_serve, false},
    };
    for (const auto& [name, help, handler, takes_run] : commands) {
        auto* sub = app.add_subcommand(name, help);
        if (takes_run) sub->add_option("--run", run_filter, "Restrict to one run id");
        if (name == "cf-label") {
            sub->add_option("--approve", approve, "Variant ids to label despite failed validation")->delimiter(',');
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage_error", e.what());
        return 2;
    }

    const auto* chosen = app.get_subcommands().front();
    Handler handler = nullptr;
    for (const auto& [name, help, h, takes_run] : commands)
        if (name == chosen->get_name()) handler = h;

    try {
        if (config_path.empty()) throw UsageError("--config is required");
        Context ctx;
        ctx.cfg = load_config(config_path);
        ctx.seed = seed.value_or(ctx.cfg.seed);
        ctx.stub = stub;
        ctx.dry_run = dry_run;
        ctx.ws.root = out_dir.empty() ? ctx.cfg.out_dir : fs::path(out_dir);
        if (!run_filter.empty()) ctx.run_filter = run_filter;
        ctx.approve = approve;
        ctx.out = &out;
        ctx.err = &err;
        if (stub) {
            // Fixed timestamps keep stub outputs byte-identical.
            using namespace std::chrono;
            ctx.clock = std::make_unique<util::FixedClock>(sys_days{year{2024} / 1 / 1});
        } else {
            ctx.clock = std::make_unique<util::SystemClock>();
        }
        return handler(ctx);
    } catch (const UsageError& e) {
        print_error(err, e.code(), e.what());
        return 2;
    } catch (const Error& e) {
        print_error(err, e.code(), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error(err, "internal_error", e.what());
        return 1;
    }
}

}  // namespace vulnlens::cli
