#include "workspace.hpp"

#include <atomic>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "vulnlens/cli.hpp"
#include "vulnlens/corpus.hpp"
#include "vulnlens/counterfactual.hpp"
#include "vulnlens/labeling.hpp"
#include "vulnlens/service.hpp"
#include "vulnlens/util/files.hpp"

namespace testkit {

namespace cf = vulnlens::counterfactual;
namespace lab = vulnlens::labeling;

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter.fetch_add(1)));
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

void write_text(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    f << content;
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

fs::path test_file(const std::string& rel) { return fs::path(VULNLENS_TEST_DIR) / rel; }

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_text(e.path());
    }
    return out;
}

CliResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    CliResult r;
    r.code = vulnlens::cli::run_command(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string pipeline_config(const fs::path& corpus_csv, const fs::path& out_dir, int cf_target) {
    std::ostringstream y;
    y << "seed: 7\n"
      << "out_dir: " << out_dir.string() << "\n"
      << "corpus: {source: " << corpus_csv.string() << ", text_column: text}\n"
      << "k: 10\n"
      << "providers:\n"
      << "  small:\n"
      << "    endpoint: https://api.example.invalid/v1/chat/completions\n"
      << "    model: llama-3-8b\n"
      << "    temperature: 0.7\n"
      << "    auth_env: LLM_API_KEY\n"
      << "    meta: {noise: 0.1}\n"
      << "  rewriter:\n"
      << "    endpoint: https://api.example.invalid/v1/chat/completions\n"
      << "    model: rewriter-model\n"
      << "    temperature: 0\n"
      << "configurations:\n"
      << "  - {provider: small, strategy: custom}\n"
      << "sampling:\n"
      << "  targets: {negative: 4, positive: 2, inconclusive: 2}\n"
      << "analytics: {n_boot: 2000}\n"
      << "counterfactual:\n"
      << "  target: " << cf_target << "\n"
      << "  rewriter: rewriter\n"
      << "  configurations:\n"
      << "    - {provider: small, strategy: custom}\n";
    return y.str();
}

int fill_worksheet_from_text(const fs::path& workspace) {
    vulnlens::service::Workspace ws{workspace};
    std::map<std::string, std::string> texts;
    for (const auto& n : vulnlens::corpus::load_corpus(ws.corpus())) texts[n.id] = n.clean_text;
    auto rows = cf::parse_worksheet(read_text(ws.worksheet()));
    int filled = 0;
    for (auto& row : rows) {
        if (!row.sex.empty() && !row.race.empty()) continue;
        const std::string& text = texts.at(row.narrative_id);
        const auto start = text.find("stopped a ");
        std::istringstream words(text.substr(start + 10));
        std::string race, noun;
        words >> race >> noun;
        row.race = race;
        row.sex = noun == "man" ? "male" : "female";
        row.evidence_span = "a " + race + " " + noun;
        ++filled;
    }
    vulnlens::util::write_atomic(ws.worksheet(), cf::worksheet_csv(rows));
    return filled;
}

int write_human_labels(const fs::path& workspace) {
    vulnlens::service::Workspace ws{workspace};
    const auto sample = nlohmann::json::parse(read_text(ws.sample()));
    lab::HumanLabelStore store(ws.human_labels());
    int n = 0;
    for (const auto& stratum : sample["strata"]) {
        const auto v = *vulnlens::codebook::parse_vulnerability(stratum["vulnerability"].get<std::string>());
        const auto ref = *lab::parse_outcome(stratum["label"].get<std::string>());
        for (const auto& id : stratum["narrative_ids"]) {
            auto outcome = ref;
            if (n % 4 == 3 && ref != lab::LabelOutcome::Negative) {
                outcome = static_cast<lab::LabelOutcome>(lab::ordinal(ref) - 1);
            }
            for (const char* coder : {"coder-a", "coder-b"}) {
                lab::HumanLabel l;
                l.narrative_id = id.get<std::string>();
                l.vulnerability = v;
                l.coder_id = coder;
                l.outcome = outcome;
                l.timestamp = "2024-01-02T00:00:00Z";
                store.record(l);
            }
            ++n;
        }
    }
    return n;
}

}  // namespace testkit
