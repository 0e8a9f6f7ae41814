#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vulnlens/counterfactual.hpp"
#include "vulnlens/labeling.hpp"

namespace vulnlens::biasstats {

using counterfactual::Race;
using counterfactual::Sex;

/// Column order of the fixed effects.
inline constexpr int kNumBeta = 7;
inline constexpr std::array<std::string_view, kNumBeta> kBetaNames = {
    "intercept", "race_black", "race_white", "race_hispanic", "race_asian", "sex_female", "sex_male"};

enum class OutcomeMode { per_iteration, per_variant_consensus };

std::string_view to_string(OutcomeMode m);
std::optional<OutcomeMode> parse_outcome_mode(std::string_view s);

struct DesignMatrix {
    std::vector<int> y;
    std::vector<Race> race;
    std::vector<Sex> sex;
    std::vector<int> group;               ///< contiguous from 0
    std::vector<std::string> group_ids;  ///< base narrative id per group index
    std::size_t dropped_missing = 0;
    std::vector<std::string> warnings;

    std::size_t n_obs() const { return y.size(); }
    int n_groups() const { return static_cast<int>(group_ids.size()); }
    Eigen::Matrix<double, kNumBeta, 1> row(std::size_t i) const;
    void add(int y, Race r, Sex s, int group);
};

Eigen::Matrix<double, kNumBeta, 1> encode(Race r, Sex s);

/// Rows from labels of counterfactual variants (narrative ids built by
/// counterfactual::variant_id). Groups are ordered by base id. Missing
/// outcomes are dropped and counted; a base left without rows is dropped
/// with a warning. Throws IntegrityError for ids that are not variant ids.
DesignMatrix build_design(const std::vector<labeling::LabelRecord>& records, int k,
                          OutcomeMode mode = OutcomeMode::per_iteration);

using Beta = Eigen::Matrix<double, kNumBeta, 1>;

struct GroupLaplace {
    double loglik = 0;
    double u_hat = 0;
};

/// Laplace-approximate marginal log-likelihood of one group. `rows` index
/// into `design`. Throws NumericalError (naming `group_label`) when the
/// mode search does not converge in 100 Newton steps.
GroupLaplace group_loglik_laplace(const DesignMatrix& design, const std::vector<std::size_t>& rows,
                                  const Beta& beta, double sigma, const std::string& group_label = "");

/// Summed Laplace log-likelihood and its gradient in (beta, sigma). The
/// objective depends on sigma only through sigma squared.
struct Objective {
    double loglik = 0;
    Eigen::VectorXd gradient;  ///< size kNumBeta + 1
};

Objective laplace_objective(const DesignMatrix& design, const Beta& beta, double sigma);

/// Pooled (no random effect) logistic log-likelihood.
double pooled_loglik(const DesignMatrix& design, const Beta& beta);

struct GlmmOptions {
    bool sigma_fixed_zero = false;
    int max_iterations = 1000;
    double gradient_tolerance = 1e-6;
    double initial_sigma = 0.5;
};

struct GlmmFit {
    Beta beta = Beta::Zero();
    double sigma = 0;
    double loglik = 0;
    double loglik_initial = 0;
    Eigen::MatrixXd vcov;  ///< (beta, log sigma); log-sigma entries are 0 when sigma_at_boundary
    bool converged = false;
    bool sigma_at_boundary = false;
    int n_groups = 0;
    std::size_t n_obs = 0;
    int iterations = 0;
    std::vector<double> loglik_trace;
    std::vector<double> gradient_trace;  ///< max-norm per iteration
    std::vector<std::string> diagnostics;
};

nlohmann::ordered_json diagnostics_json(const GlmmFit& fit);

/// Pooled logistic maximum likelihood by Newton's method; used to start
/// the mixed-model fit.
Beta pooled_logistic(const DesignMatrix& design, int max_iterations = 100, bool* converged = nullptr);

/// Maximize the Laplace marginal likelihood by BFGS from (pooled beta,
/// sigma = 0.5). Throws PreconditionError when there are fewer than two
/// groups or fewer observations than parameters.
GlmmFit fit_glmm(const DesignMatrix& design, const GlmmOptions& options = {});

enum class Factor { race, sex };
std::string_view to_string(Factor f);

struct MarginalEffect {
    Factor factor{};
    std::string level;
    double ame = 0;
    double se = 0;
    double ci_low = 0, ci_high = 0;
    double z = 0;
    double p = 1;
    double p_holm = 1;
};

/// Average marginal effect of every non-reference level at u = 0, with
/// delta-method standard errors from the beta block of the covariance.
/// Throws PreconditionError for a non-converged fit.
std::vector<MarginalEffect> average_marginal_effects(const GlmmFit& fit, const DesignMatrix& design);

/// Holm step-down adjustment, returned in input order. Throws DomainError
/// for p outside [0, 1].
std::vector<double> holm_adjust(const std::vector<double>& p);

struct EffectSet {
    std::string config_id;
    codebook::VulnerabilityId vulnerability{};
    std::vector<MarginalEffect> effects;
};

struct BiasRow {
    std::string config_id;
    codebook::VulnerabilityId vulnerability{};
    MarginalEffect effect;
    bool significant = false;
};

inline constexpr double kSignificance = 0.05;

/// Pools every p-value into a single Holm family.
std::vector<BiasRow> bias_report(const std::vector<EffectSet>& sets);

std::string bias_csv(const std::vector<BiasRow>& rows);
nlohmann::ordered_json bias_json(const std::vector<BiasRow>& rows);

}  // namespace vulnlens::biasstats
