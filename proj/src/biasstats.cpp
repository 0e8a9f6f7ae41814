#include "vulnlens/biasstats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "vulnlens/analytics.hpp"
#include "vulnlens/error.hpp"
#include "vulnlens/util/csv.hpp"

namespace vulnlens::biasstats {

using nlohmann::ordered_json;
using labeling::LabelOutcome;

std::string_view to_string(OutcomeMode m) {
    return m == OutcomeMode::per_iteration ? "per_iteration" : "per_variant_consensus";
}

std::optional<OutcomeMode> parse_outcome_mode(std::string_view s) {
    if (s == "per_iteration") return OutcomeMode::per_iteration;
    if (s == "per_variant_consensus") return OutcomeMode::per_variant_consensus;
    return std::nullopt;
}

Beta encode(Race r, Sex s) {
    Beta x = Beta::Zero();
    x[0] = 1.0;
    switch (r) {
        case Race::black: x[1] = 1; break;
        case Race::white: x[2] = 1; break;
        case Race::hispanic: x[3] = 1; break;
        case Race::asian: x[4] = 1; break;
        case Race::unknown: break;
    }
    switch (s) {
        case Sex::female: x[5] = 1; break;
        case Sex::male: x[6] = 1; break;
        case Sex::unknown: break;
    }
    return x;
}

Beta DesignMatrix::row(std::size_t i) const { return encode(race[i], sex[i]); }

void DesignMatrix::add(int yv, Race r, Sex s, int g) {
    y.push_back(yv);
    race.push_back(r);
    sex.push_back(s);
    group.push_back(g);
}

DesignMatrix build_design(const std::vector<labeling::LabelRecord>& records, int k, OutcomeMode mode) {
    struct Cell {
        std::vector<labeling::LabelRecord> recs;
    };
    // base -> (sex, race) -> records, all in sorted order for determinism
    std::map<std::string, std::map<std::pair<int, int>, Cell>> by_base;
    for (const auto& r : records) {
        auto key = counterfactual::parse_variant_id(r.narrative_id);
        if (!key) throw IntegrityError("label for " + r.narrative_id + " is not linked to a counterfactual base");
        by_base[key->base_id][{static_cast<int>(key->sex), static_cast<int>(key->race)}].recs.push_back(r);
    }

    DesignMatrix d;
    for (auto& [base, cells] : by_base) {
        const int g = d.n_groups();
        std::size_t before = d.n_obs();
        for (auto& [sr, cell] : cells) {
            const auto sex = static_cast<Sex>(sr.first);
            const auto race = static_cast<Race>(sr.second);
            if (mode == OutcomeMode::per_iteration) {
                std::sort(cell.recs.begin(), cell.recs.end(),
                          [](const auto& a, const auto& b) { return a.iteration < b.iteration; });
                for (const auto& r : cell.recs) {
                    if (!r.outcome) {
                        ++d.dropped_missing;
                        continue;
                    }
                    d.add(analytics::binarize(*r.outcome), race, sex, g);
                }
            } else {
                const auto votes = labeling::tally_votes(cell.recs, k);
                if (votes.n_valid() == 0) {
                    ++d.dropped_missing;
                    continue;
                }
                d.add(analytics::binarize(labeling::consensus(votes).outcome), race, sex, g);
            }
        }
        if (d.n_obs() == before) {
            d.warnings.push_back("base " + base + " has no usable labels; dropped");
            continue;
        }
        d.group_ids.push_back(base);
    }
    return d;
}

// ---------------------------------------------------------------------------

namespace {

double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::vector<std::vector<std::size_t>> group_rows(const DesignMatrix& d) {
    std::vector<std::vector<std::size_t>> g(static_cast<std::size_t>(d.n_groups()));
    for (std::size_t i = 0; i < d.n_obs(); ++i) g[static_cast<std::size_t>(d.group[i])].push_back(i);
    return g;
}

struct GroupEval {
    double loglik = 0;
    double u = 0;
    Beta grad_beta = Beta::Zero();
    double dl_ds = 0;  ///< derivative with respect to sigma squared
};

double group_f(const std::vector<double>& eta, const std::vector<int>& y, double u, double s) {
    double f = 0;
    for (std::size_t i = 0; i < eta.size(); ++i) f += y[i] * (eta[i] + u) - log1pexp(eta[i] + u);
    return f - u * u / (2 * s);
}

GroupEval eval_group(const DesignMatrix& d, const std::vector<std::size_t>& rows, const Beta& beta, double sigma,
                     bool want_grad, const std::string& label) {
    const double s = sigma * sigma;
    const std::size_t n = rows.size();
    std::vector<double> eta(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        eta[i] = d.row(rows[i]).dot(beta);
        y[i] = d.y[rows[i]];
    }

    GroupEval out;
    double u = 0;
    if (s > 0) {
        bool done = false;
        for (int it = 0; it < 100; ++it) {
            double r = 0, S = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double p = logistic(eta[i] + u);
                r += y[i] - p;
                S += p * (1 - p);
            }
            const double g = r - u / s;
            double step = s * g / (1 + s * S);
            if (!std::isfinite(step)) break;
            const double f0 = group_f(eta, y, u, s);
            int halvings = 0;
            while (group_f(eta, y, u + step, s) < f0 - 1e-12 * (1 + std::abs(f0)) && halvings < 50) {
                step *= 0.5;
                ++halvings;
            }
            u += step;
            if (std::abs(step) < 1e-10 * (1 + std::abs(u))) {
                done = true;
                // one more full step: quadratic convergence leaves no visible error
                r = 0;
                S = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double p = logistic(eta[i] + u);
                    r += y[i] - p;
                    S += p * (1 - p);
                }
                u += s * (r - u / s) / (1 + s * S);
                break;
            }
        }
        if (!done) {
            throw NumericalError("random-effect mode search did not converge for group " +
                                 (label.empty() ? std::string("?") : label));
        }
    }
    out.u = u;

    double ll = 0, r = 0, S = 0, sum_w3 = 0;
    Beta sum_rx = Beta::Zero(), sum_wx = Beta::Zero(), sum_w3x = Beta::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        const double z = eta[i] + u;
        ll += y[i] * z - log1pexp(z);
        const double p = logistic(z);
        const double w = p * (1 - p);
        S += w;
        if (!want_grad) continue;
        const double w3 = w * (1 - 2 * p);
        const Beta x = d.row(rows[i]);
        r += y[i] - p;
        sum_w3 += w3;
        sum_rx += (y[i] - p) * x;
        sum_wx += w * x;
        sum_w3x += w3 * x;
    }
    if (s > 0) ll += -u * u / (2 * s) - 0.5 * std::log1p(s * S);
    out.loglik = ll;

    if (want_grad) {
        const double c = s / (1 + s * S);
        const Beta du_db = -c * sum_wx;
        out.grad_beta = sum_rx - 0.5 * c * (sum_w3x + sum_w3 * du_db);
        const double du_ds = r / (1 + s * S);
        out.dl_ds = 0.5 * r * r - 0.5 * (S + s * sum_w3 * du_ds) / (1 + s * S);
    }
    return out;
}

double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

GroupLaplace group_loglik_laplace(const DesignMatrix& design, const std::vector<std::size_t>& rows,
                                  const Beta& beta, double sigma, const std::string& group_label) {
    if (sigma < 0) throw DomainError("sigma must be >= 0");
    const auto e = eval_group(design, rows, beta, sigma, false, group_label);
    return {e.loglik, e.u};
}

Objective laplace_objective(const DesignMatrix& design, const Beta& beta, double sigma) {
    const auto groups = group_rows(design);
    Objective o;
    o.gradient = Eigen::VectorXd::Zero(kNumBeta + 1);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto e = eval_group(design, groups[g], beta, sigma, true, design.group_ids[g]);
        o.loglik += e.loglik;
        o.gradient.head<kNumBeta>() += e.grad_beta;
        o.gradient[kNumBeta] += 2 * sigma * e.dl_ds;
    }
    return o;
}

double pooled_loglik(const DesignMatrix& design, const Beta& beta) {
    double ll = 0;
    for (std::size_t i = 0; i < design.n_obs(); ++i) {
        const double z = design.row(i).dot(beta);
        ll += design.y[i] * z - log1pexp(z);
    }
    return ll;
}

Beta pooled_logistic(const DesignMatrix& design, int max_iterations, bool* converged) {
    Beta beta = Beta::Zero();
    bool ok = false;
    for (int it = 0; it < max_iterations; ++it) {
        Beta grad = Beta::Zero();
        Eigen::Matrix<double, kNumBeta, kNumBeta> info = Eigen::Matrix<double, kNumBeta, kNumBeta>::Zero();
        for (std::size_t i = 0; i < design.n_obs(); ++i) {
            const Beta x = design.row(i);
            const double p = logistic(x.dot(beta));
            grad += (design.y[i] - p) * x;
            info += p * (1 - p) * x * x.transpose();
        }
        info.diagonal().array() += 1e-12;
        const Beta step = info.ldlt().solve(grad);
        if (!step.allFinite()) break;
        beta += step;
        if (step.cwiseAbs().maxCoeff() < 1e-12 || grad.cwiseAbs().maxCoeff() < 1e-11) {
            ok = true;
            break;
        }
    }
    if (converged) *converged = ok;
    return beta;
}

namespace {

/// Negative Hessian of the log-likelihood in (beta, sigma) by central
/// differences of the analytic gradient.
Eigen::MatrixXd numeric_information(const DesignMatrix& d, const Eigen::VectorXd& theta, int dims) {
    Eigen::MatrixXd info(dims, dims);
    for (int j = 0; j < dims; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(theta[j]));
        Eigen::VectorXd tp = theta, tm = theta;
        tp[j] += h;
        tm[j] -= h;
        const auto gp = laplace_objective(d, tp.head<kNumBeta>(), tp[kNumBeta]).gradient;
        const auto gm = laplace_objective(d, tm.head<kNumBeta>(), tm[kNumBeta]).gradient;
        info.col(j) = -(gp - gm).head(dims) / (2 * h);
    }
    return 0.5 * (info + info.transpose());
}

bool invert_pd(const Eigen::MatrixXd& m, Eigen::MatrixXd& inv) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) return false;
    const double top = es.eigenvalues().cwiseAbs().maxCoeff();
    if (!(es.eigenvalues().minCoeff() > 1e-10 * std::max(1.0, top))) return false;
    inv = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    inv = 0.5 * (inv + inv.transpose());
    return true;
}

constexpr double kBoundarySigma = 1e-3;

}  // namespace

GlmmFit fit_glmm(const DesignMatrix& design, const GlmmOptions& opt) {
    if (design.n_groups() < 2) throw PreconditionError("mixed model needs at least 2 groups");
    if (design.n_obs() < static_cast<std::size_t>(kNumBeta + 1)) {
        throw PreconditionError("mixed model needs at least " + std::to_string(kNumBeta + 1) + " observations");
    }
    GlmmFit fit;
    fit.n_groups = design.n_groups();
    fit.n_obs = design.n_obs();
    fit.vcov = Eigen::MatrixXd::Zero(kNumBeta + 1, kNumBeta + 1);

    // Columns with no variation cannot be estimated.
    bool identifiable = true;
    for (int j = 1; j < kNumBeta; ++j) {
        std::size_t ones = 0;
        for (std::size_t i = 0; i < design.n_obs(); ++i) ones += design.row(i)[j] > 0;
        if (ones == 0 || ones == design.n_obs()) {
            fit.diagnostics.push_back("column " + std::string(kBetaNames[j]) + " is constant; not identifiable");
            identifiable = false;
        }
    }

    bool pooled_ok = false;
    const Beta beta0 = pooled_logistic(design, 100, &pooled_ok);
    if (!pooled_ok) fit.diagnostics.push_back("pooled logistic start did not converge (separation?)");

    if (opt.sigma_fixed_zero) {
        fit.beta = beta0;
        fit.sigma = 0;
        fit.loglik = fit.loglik_initial = pooled_loglik(design, beta0);
        fit.sigma_at_boundary = true;
        fit.diagnostics.push_back("sigma fixed at 0");
        Eigen::VectorXd theta(kNumBeta + 1);
        theta << beta0, 0.0;
        const auto info = numeric_information(design, theta, kNumBeta);
        Eigen::MatrixXd inv;
        fit.converged = pooled_ok && identifiable && invert_pd(info, inv);
        if (fit.converged) fit.vcov.topLeftCorner(kNumBeta, kNumBeta) = inv;
        else fit.diagnostics.push_back("information matrix is singular");
        return fit;
    }

    Eigen::VectorXd theta(kNumBeta + 1);
    theta << beta0, opt.initial_sigma;
    auto eval = [&](const Eigen::VectorXd& t) { return laplace_objective(design, t.head<kNumBeta>(), t[kNumBeta]); };
    auto crit = [](const Eigen::VectorXd& g, double sigma) {
        const double gb = max_abs(g.head(kNumBeta));
        return std::max(gb, std::abs(g[kNumBeta]) * std::max(1.0, std::abs(sigma)));
    };

    Objective cur = eval(theta);
    fit.loglik_initial = cur.loglik;
    const int dim = kNumBeta + 1;
    Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(dim, dim);
    bool scaled = false;
    bool stationary = false;
    // Minimize F = -loglik; g = -gradient.
    for (int it = 0; it < opt.max_iterations; ++it) {
        const Eigen::VectorXd g = -cur.gradient;
        fit.loglik_trace.push_back(cur.loglik);
        fit.gradient_trace.push_back(crit(g, theta[kNumBeta]));
        fit.iterations = it;
        if (fit.gradient_trace.back() < opt.gradient_tolerance) {
            stationary = true;
            break;
        }
        Eigen::VectorXd dir = -hinv * g;
        if (dir.dot(g) >= 0) {
            hinv.setIdentity();
            dir = -g;
        }
        // Backtracking line search; a step that improves the gradient is
        // accepted when the objective change is lost in rounding.
        double alpha = 1.0;
        const double f0 = -cur.loglik;
        const double slope = g.dot(dir);
        Objective next;
        Eigen::VectorXd cand;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            cand = theta + alpha * dir;
            try {
                next = eval(cand);
            } catch (const NumericalError&) {
                alpha *= 0.5;
                continue;
            }
            const double f1 = -next.loglik;
            if (std::isfinite(f1) && f1 <= f0 + 1e-4 * alpha * slope) {
                accepted = true;
                break;
            }
            if (std::isfinite(f1) && std::abs(f1 - f0) <= 1e-12 * (1 + std::abs(f0)) &&
                crit(-next.gradient, cand[kNumBeta]) < crit(g, theta[kNumBeta])) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            if (!hinv.isIdentity()) {
                hinv.setIdentity();
                scaled = false;
                continue;
            }
            fit.diagnostics.push_back("line search failed at iteration " + std::to_string(it));
            break;
        }
        const Eigen::VectorXd s = cand - theta;
        const Eigen::VectorXd yv = (-next.gradient) - g;
        const double sy = s.dot(yv);
        if (sy > 1e-14) {
            if (!scaled) {
                hinv = Eigen::MatrixXd::Identity(dim, dim) * (sy / yv.dot(yv));
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(dim, dim);
            hinv = (I - rho * s * yv.transpose()) * hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
        }
        theta = cand;
        cur = next;
    }
    if (!stationary && fit.diagnostics.empty()) {
        fit.diagnostics.push_back("no convergence within " + std::to_string(opt.max_iterations) + " iterations");
    }

    fit.beta = theta.head<kNumBeta>();
    fit.sigma = std::abs(theta[kNumBeta]);
    fit.loglik = cur.loglik;
    if (fit.beta.cwiseAbs().maxCoeff() > 15) fit.diagnostics.push_back("very large coefficient (separation?)");

    bool cov_ok = false;
    theta[kNumBeta] = fit.sigma;
    if (stationary && identifiable) {
        if (fit.sigma < kBoundarySigma) {
            fit.sigma_at_boundary = true;
            fit.diagnostics.push_back("sigma at the zero boundary; log-sigma variance not reported");
            const auto info = numeric_information(design, theta, kNumBeta);
            Eigen::MatrixXd inv;
            cov_ok = invert_pd(info, inv);
            if (cov_ok) fit.vcov.topLeftCorner(kNumBeta, kNumBeta) = inv;
        } else {
            auto info = numeric_information(design, theta, dim);
            // d sigma / d log sigma = sigma; the gradient vanishes so the
            // change of variables is a congruence.
            Eigen::VectorXd jac = Eigen::VectorXd::Ones(dim);
            jac[kNumBeta] = fit.sigma;
            info = jac.asDiagonal() * info * jac.asDiagonal();
            Eigen::MatrixXd inv;
            cov_ok = invert_pd(info, inv);
            if (cov_ok) fit.vcov = inv;
        }
        if (!cov_ok) fit.diagnostics.push_back("information matrix is singular");
    }
    fit.converged = stationary && identifiable && cov_ok;
    return fit;
}

ordered_json diagnostics_json(const GlmmFit& fit) {
    ordered_json j;
    j["converged"] = fit.converged;
    j["n_obs"] = fit.n_obs;
    j["n_groups"] = fit.n_groups;
    j["iterations"] = fit.iterations;
    ordered_json beta;
    for (int i = 0; i < kNumBeta; ++i) beta[std::string(kBetaNames[i])] = fit.beta[i];
    j["beta"] = beta;
    j["sigma"] = fit.sigma;
    j["sigma_at_boundary"] = fit.sigma_at_boundary;
    j["loglik"] = fit.loglik;
    j["loglik_initial"] = fit.loglik_initial;
    j["loglik_trace"] = fit.loglik_trace;
    j["gradient_max_norm_trace"] = fit.gradient_trace;
    ordered_json vc = ordered_json::array();
    for (Eigen::Index r = 0; r < fit.vcov.rows(); ++r) {
        std::vector<double> row(fit.vcov.cols());
        for (Eigen::Index c = 0; c < fit.vcov.cols(); ++c) row[c] = fit.vcov(r, c);
        vc.push_back(row);
    }
    j["vcov"] = vc;
    j["diagnostics"] = fit.diagnostics;
    return j;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Factor f) { return f == Factor::race ? "race" : "sex"; }

std::vector<MarginalEffect> average_marginal_effects(const GlmmFit& fit, const DesignMatrix& design) {
    if (!fit.converged) throw PreconditionError("marginal effects need a converged fit");
    if (design.n_obs() == 0) throw PreconditionError("marginal effects need observations");
    const Eigen::Matrix<double, kNumBeta, kNumBeta> V = fit.vcov.topLeftCorner(kNumBeta, kNumBeta);

    struct Level {
        Factor factor;
        std::string name;
        int column;
        int first, last;  ///< columns of the factor
    };
    const std::vector<Level> levels = {
        {Factor::race, "black", 1, 1, 4},  {Factor::race, "white", 2, 1, 4}, {Factor::race, "hispanic", 3, 1, 4},
        {Factor::race, "asian", 4, 1, 4},  {Factor::sex, "female", 5, 5, 6}, {Factor::sex, "male", 6, 5, 6},
    };
    std::vector<MarginalEffect> out;
    const double n = static_cast<double>(design.n_obs());
    for (const auto& lv : levels) {
        double ame = 0;
        Beta jac = Beta::Zero();
        for (std::size_t i = 0; i < design.n_obs(); ++i) {
            Beta x_ref = design.row(i);
            for (int c = lv.first; c <= lv.last; ++c) x_ref[c] = 0;
            Beta x_lv = x_ref;
            x_lv[lv.column] = 1;
            const double p1 = logistic(x_lv.dot(fit.beta));
            const double p0 = logistic(x_ref.dot(fit.beta));
            ame += p1 - p0;
            jac += p1 * (1 - p1) * x_lv - p0 * (1 - p0) * x_ref;
        }
        ame /= n;
        jac /= n;
        MarginalEffect e;
        e.factor = lv.factor;
        e.level = lv.name;
        e.ame = ame;
        e.se = std::sqrt(std::max(0.0, jac.dot(V * jac)));
        e.ci_low = ame - 1.96 * e.se;
        e.ci_high = ame + 1.96 * e.se;
        if (e.se > 0) {
            e.z = ame / e.se;
            e.p = std::erfc(std::abs(e.z) / std::sqrt(2.0));
        } else {
            e.z = 0;
            e.p = 1;
        }
        e.p_holm = e.p;
        out.push_back(e);
    }
    return out;
}

std::vector<double> holm_adjust(const std::vector<double>& p) {
    for (double v : p)
        if (!(v >= 0 && v <= 1)) throw DomainError("p-values must lie in [0, 1]");
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> out(m);
    double running = 0;
    for (std::size_t r = 0; r < m; ++r) {
        const double adj = std::min(1.0, static_cast<double>(m - r) * p[order[r]]);
        running = std::max(running, adj);
        out[order[r]] = running;
    }
    return out;
}

std::vector<BiasRow> bias_report(const std::vector<EffectSet>& sets) {
    std::vector<BiasRow> rows;
    std::vector<double> ps;
    for (const auto& s : sets) {
        for (const auto& e : s.effects) {
            rows.push_back({s.config_id, s.vulnerability, e, false});
            ps.push_back(e.p);
        }
    }
    const auto adj = holm_adjust(ps);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].effect.p_holm = adj[i];
        rows[i].significant = adj[i] < kSignificance;
    }
    return rows;
}

std::string bias_csv(const std::vector<BiasRow>& rows) {
    using analytics::format_number;
    std::string out = util::csv_row({"config", "vulnerability", "factor", "level", "ame", "se", "ci_low", "ci_high",
                                     "z", "p", "p_holm", "significant"});
    for (const auto& r : rows) {
        const auto& e = r.effect;
        out += util::csv_row({r.config_id, std::string(codebook::to_string(r.vulnerability)),
                              std::string(to_string(e.factor)), e.level, format_number(e.ame), format_number(e.se),
                              format_number(e.ci_low), format_number(e.ci_high), format_number(e.z),
                              format_number(e.p), format_number(e.p_holm), r.significant ? "true" : "false"});
    }
    return out;
}

ordered_json bias_json(const std::vector<BiasRow>& rows) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : rows) {
        const auto& e = r.effect;
        ordered_json j;
        j["config"] = r.config_id;
        j["vulnerability"] = codebook::to_string(r.vulnerability);
        j["factor"] = to_string(e.factor);
        j["level"] = e.level;
        j["ame"] = e.ame;
        j["se"] = e.se;
        j["ci_low"] = e.ci_low;
        j["ci_high"] = e.ci_high;
        j["z"] = e.z;
        j["p"] = e.p;
        j["p_holm"] = e.p_holm;
        j["significant"] = r.significant;
        arr.push_back(std::move(j));
    }
    return arr;
}

}  // namespace vulnlens::biasstats
