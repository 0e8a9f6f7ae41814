#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vulnlens/biasstats.hpp"
#include "vulnlens/codebook.hpp"
#include "vulnlens/counterfactual.hpp"
#include "vulnlens/gateway.hpp"
#include "vulnlens/labeling.hpp"

namespace vulnlens::cli {

/// One entry of `configurations`: a provider and strategy applied to a set
/// of vulnerabilities.
struct ConfigurationSpec {
    std::string provider;
    codebook::PromptStrategy strategy = codebook::PromptStrategy::custom;
    std::vector<codebook::VulnerabilityId> vulnerabilities;
};

/// Parsed YAML run configuration. Relative paths are resolved against the
/// directory holding the file.
struct AppConfig {
    std::filesystem::path base_dir;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "out";

    std::string corpus_source;
    std::string text_column = "text";
    std::filesystem::path codebook_path;

    int k = labeling::kDefaultRepeats;
    labeling::ConsensusRule consensus_rule = labeling::ConsensusRule::plurality;

    std::map<std::string, gateway::ProviderConfig> providers;
    std::vector<ConfigurationSpec> configurations;

    std::string reference_provider;
    codebook::PromptStrategy reference_strategy = codebook::PromptStrategy::custom;
    labeling::StratumTargets sample_targets;

    int n_boot = 10000;

    int cf_target = 100;
    std::string cf_rewriter;
    counterfactual::ValidationConfig cf_validation;
    std::vector<ConfigurationSpec> cf_configurations;

    biasstats::OutcomeMode outcome_mode = biasstats::OutcomeMode::per_iteration;

    int agreement_threshold = 8;
    int page_size = 50;
    std::filesystem::path tokens_file;
    std::string host = "127.0.0.1";
    int port = 8080;
};

/// Throws ConfigError naming the offending key.
AppConfig load_config(const std::filesystem::path& path);
AppConfig parse_config(const std::string& yaml_text, const std::filesystem::path& base_dir);

/// Directory holding the shipped codebook.
std::filesystem::path default_data_dir();

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Returns 0 on success, 2 on usage errors and 1 on any other
/// failure, with a JSON {code, message} line on `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vulnlens::cli
