#pragma once

#include <deque>
#include <mutex>
#include <string>
#include <variant>
#include <vector>

#include "vulnlens/error.hpp"
#include "vulnlens/gateway.hpp"

namespace testkit {

/// Transient failure with this HTTP status (0 = connection failure).
struct Transient {
    int status = 503;
};
/// Permanent failure.
struct Permanent {
    int status = 400;
};

using Step = std::variant<std::string, Transient, Permanent>;

/// Provider that replays a fixed script and records every request. Once
/// the script runs out it repeats `fallback`.
class ScriptedProvider final : public vulnlens::gateway::ChatProvider {
public:
    explicit ScriptedProvider(std::vector<Step> script = {}, std::string fallback = "Classification: NEGATIVE")
        : script_(script.begin(), script.end()), fallback_(std::move(fallback)) {}

    vulnlens::gateway::CompletionResult complete(const vulnlens::gateway::ProviderConfig&,
                                                 const vulnlens::gateway::CompletionRequest& request) override {
        Step step = fallback_;
        {
            std::lock_guard lk(mu_);
            requests_.push_back(request);
            if (!script_.empty()) {
                step = script_.front();
                script_.pop_front();
            }
        }
        if (auto* t = std::get_if<Transient>(&step)) {
            throw vulnlens::ProviderError("scripted transient failure", true, t->status);
        }
        if (auto* p = std::get_if<Permanent>(&step)) {
            throw vulnlens::ProviderError("scripted permanent failure", false, p->status);
        }
        vulnlens::gateway::CompletionResult r;
        r.text = std::get<std::string>(step);
        r.request_id = "scripted-" + std::to_string(requests_.size());
        return r;
    }

    std::vector<vulnlens::gateway::CompletionRequest> requests() const {
        std::lock_guard lk(mu_);
        return requests_;
    }

private:
    mutable std::mutex mu_;
    std::deque<Step> script_;
    std::string fallback_;
    std::vector<vulnlens::gateway::CompletionRequest> requests_;
};

inline vulnlens::gateway::ProviderConfig scripted_config(const std::string& name = "scripted") {
    vulnlens::gateway::ProviderConfig cfg;
    cfg.name = name;
    cfg.endpoint = "https://scripted.invalid/v1/chat/completions";
    cfg.model_name = "scripted-model";
    cfg.temperature = 0.7;
    return cfg;
}

}  // namespace testkit
