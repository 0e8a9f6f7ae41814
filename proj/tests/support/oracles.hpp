#pragma once

// Reference implementations used to check the library. Each one is written
// from the definition, independently of the production code path.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vulnlens/analytics.hpp"
#include "vulnlens/biasstats.hpp"
#include "vulnlens/labeling.hpp"

namespace oracle {

using vulnlens::labeling::LabelOutcome;

/// Plurality winner by scanning every label against every other.
struct ConsensusOracle {
    LabelOutcome outcome = LabelOutcome::Inconclusive;
    int agreement = 0;
    bool unanimous = false;
    bool tie = false;
};
ConsensusOracle consensus(const std::array<int, 3>& counts, int n_missing);

double mse(const std::vector<std::pair<int, int>>& pairs);
/// Precision, recall, F1 of the positive class {1, 2} vs {0}; 0 for empty denominators.
std::array<double, 3> prf(const std::vector<std::pair<int, int>>& pairs);
std::array<std::array<long, 3>, 3> confusion(const std::vector<std::pair<int, int>>& pairs);
/// Entropy in bits written as log2(n) - sum(c log2 c) / n.
double entropy_bits(const std::array<int, 3>& counts);

/// Golub-Welsch nodes and weights for the physicists' Hermite rule.
struct Quadrature {
    std::vector<double> nodes, weights;
};
Quadrature gauss_hermite(int n);

/// Marginal log-likelihood of one random-intercept logistic group,
/// integrating the intercept by Gauss-Hermite quadrature centred and scaled
/// at the mode of the integrand.
double group_loglik_quadrature(const std::vector<double>& eta, const std::vector<int>& y, double sigma,
                               const Quadrature& q);

double total_loglik_quadrature(const vulnlens::biasstats::DesignMatrix& d, const vulnlens::biasstats::Beta& beta,
                               double sigma, int nodes = 60);

/// Pooled logistic MLE by iteratively reweighted least squares with QR.
Eigen::VectorXd irls(const vulnlens::biasstats::DesignMatrix& d, int max_iter = 100, double tol = 1e-12);

/// Holm adjustment by the textbook loop over sorted indices.
std::vector<double> holm(const std::vector<double>& p);

}  // namespace oracle

namespace synth {

using vulnlens::biasstats::DesignMatrix;

/// Random-intercept logistic data with random sex and race per row.
DesignMatrix simulate_glmm(const vulnlens::biasstats::Beta& beta, double sigma, int groups, int per_group,
                           std::uint64_t seed);

/// A synthetic narrative of at least 200 characters about one subject.
/// `cue` is a phrase inserted into the description (may be empty).
std::string narrative(int index, const std::string& race, const std::string& sex, const std::string& cue);

/// CSV (id,text) with `n` narratives cycling through subjects and cue words
/// recognised by the stub provider.
std::string corpus_csv(int n);

/// Summary of one narrative with the given vote counts (plurality rule).
vulnlens::labeling::NarrativeSummary summary(const std::string& id, std::array<int, 3> counts, int n_missing = 0);

/// Random k-vote distribution with a strong tilt toward one label.
std::array<int, 3> random_votes(std::uint64_t& state, int k);

}  // namespace synth
