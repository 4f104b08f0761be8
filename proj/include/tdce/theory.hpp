#pragma once

// Numerical checks of the Gumbel-softmax approximation theory: the closed-form
// minimiser of sum pi_i / x_i^tau, the exact and approximated densities on the
// simplex, Monte-Carlo KL between them, the two stated forms of the KL bounds,
// softmax-Jacobian bounds, and a toy K = 3 simplex trajectory simulation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tdce/data.hpp"
#include "tdce/diffusion.hpp"
#include "tdce/error.hpp"
#include "tdce/guidance.hpp"
#include "tdce/random.hpp"

namespace tdce::theory {

inline void require_simplex(const Eigen::VectorXd& p, const char* what, bool strictly_positive = false) {
    if (p.size() < 2) throw DomainError(std::string(what) + ": need at least two entries");
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (!std::isfinite(p(i)) || p(i) < 0.0 || (strictly_positive && p(i) <= 0.0))
            throw DomainError(std::string(what) + ": entry " + std::to_string(i) + " out of range");
    if (std::abs(p.sum() - 1.0) > 1e-9) throw DomainError(std::string(what) + ": entries must sum to 1");
}

/// log of the simplex volume in the first K-1 coordinates, 1/(K-1)!.
inline double log_simplex_volume(Eigen::Index k) { return -std::lgamma(static_cast<double>(k)); }

inline double logsumexp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

// ---------------------------------------------------------------------------
// Minimiser of F(x) = sum_i pi_i x_i^-tau over the simplex

struct SimplexMinimizer {
    Eigen::VectorXd x;
    double value = 0.0;
};

inline double simplex_objective(const Eigen::VectorXd& pi, const Eigen::VectorXd& x, double tau) {
    return (pi.array() * x.array().pow(-tau)).sum();
}

inline SimplexMinimizer simplex_minimizer_closed_form(const Eigen::VectorXd& pi, double tau) {
    require_simplex(pi, "simplex_minimizer_closed_form");
    if (!(tau > 0.0)) throw DomainError("simplex_minimizer_closed_form: tau must be positive");
    const Eigen::VectorXd w = pi.array().pow(1.0 / (tau + 1.0));
    const double s = w.sum();
    return {w / s, std::pow(s, tau + 1.0)};
}

// ---------------------------------------------------------------------------
// Densities on the simplex (with respect to Lebesgue measure on the first K-1
// coordinates)

/// Exact Gumbel-softmax log density, evaluated in log space.
inline double gs_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& pi, double tau) {
    if (x.size() != pi.size()) throw ShapeError("gs_log_density: length mismatch");
    if (!(tau > 0.0)) throw DomainError("gs_log_density: tau must be positive");
    if ((x.array() <= 0.0).any()) throw DomainError("gs_log_density: point must be strictly inside the simplex");
    if ((pi.array() <= 0.0).any()) throw DomainError("gs_log_density: pi must be strictly positive");
    const double k = static_cast<double>(x.size());
    const Eigen::ArrayXd lx = x.array().log();
    const Eigen::ArrayXd lp = pi.array().log();
    return std::lgamma(k) + (k - 1.0) * std::log(tau) - k * logsumexp((lp - tau * lx).matrix()) +
           (lp - (tau + 1.0) * lx).sum();
}

struct Estimate {
    double value = 0.0;
    double se = 0.0;
    std::size_t samples = 0;
};

/// log Z(pi) = log of the integral of prod_i pi_i^{x_i} over the simplex, by
/// uniform-simplex Monte Carlo. The standard error is propagated through the log.
inline Estimate estimate_logZ(const Eigen::VectorXd& pi, std::size_t n, std::uint64_t seed) {
    if ((pi.array() <= 0.0).any()) throw DomainError("estimate_logZ: pi entries must be positive");
    if (n < 2) throw DomainError("estimate_logZ: need at least two samples");
    Rng rng(seed);
    const Eigen::VectorXd lp = pi.array().log();
    double mean = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = std::exp(rng.simplex_uniform(pi.size()).dot(lp));
        const double delta = v - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (v - mean);
    }
    const double se = std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n));
    return {std::log(mean) + log_simplex_volume(pi.size()), se / mean, n};
}

/// x . log pi - log Z.
inline double approx_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& pi, double log_z) {
    if (x.size() != pi.size()) throw ShapeError("approx_log_density: length mismatch");
    if ((pi.array() <= 0.0).any()) throw DomainError("approx_log_density: pi entries must be positive");
    return x.dot(pi.array().log().matrix()) - log_z;
}

/// Integral of exp(log_density) over the simplex by uniform-simplex Monte Carlo.
template <class LogDensity>
Estimate integrate_density(LogDensity&& log_density, Eigen::Index k, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const double vol = std::exp(log_simplex_volume(k));
    double mean = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = vol * std::exp(log_density(rng.simplex_uniform(k)));
        const double delta = v - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (v - mean);
    }
    return {mean, std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n)), n};
}

// ---------------------------------------------------------------------------
// Monte-Carlo KL(p_GS || p_approx)

/// Clamp entrywise to [x_min, 1 - (K-1) x_min], then renormalise.
inline Eigen::VectorXd clamp_to_interior(Eigen::VectorXd x, double x_min) {
    const double hi = 1.0 - static_cast<double>(x.size() - 1) * x_min;
    x = x.cwiseMax(x_min).cwiseMin(hi);
    return x / x.sum();
}

struct KlEstimate {
    double kl = 0.0;
    double se = 0.0;          // combined sampling and log Z error
    double sampling_se = 0.0;
    Estimate log_z;
    std::size_t samples = 0;
};

inline KlEstimate mc_kl_estimate(const Eigen::VectorXd& pi, double tau, std::size_t n, std::uint64_t seed,
                                 double x_min = 1e-4, std::size_t logz_samples = 1000000) {
    require_simplex(pi, "mc_kl_estimate", true);
    if (!(tau > 0.0)) throw DomainError("mc_kl_estimate: tau must be positive");
    if (!(x_min > 0.0) || x_min * static_cast<double>(pi.size()) >= 1.0)
        throw DomainError("mc_kl_estimate: x_min must lie in (0, 1/K)");
    if (n < 2) throw DomainError("mc_kl_estimate: need at least two samples");
    KlEstimate r;
    r.log_z = estimate_logZ(pi, logz_samples, derive_seed(seed, 1));
    r.samples = n;
    Rng rng(derive_seed(seed, 0));
    const Eigen::VectorXd lp = pi.array().log();
    double mean = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd x =
            clamp_to_interior(diffusion::gumbel_softmax_sample(lp, tau, rng.gumbel_vector(pi.size())), x_min);
        const double v = gs_log_density(x, pi, tau) - approx_log_density(x, pi, r.log_z.value);
        const double delta = v - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (v - mean);
    }
    r.kl = mean;
    r.sampling_se = std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n));
    r.se = std::hypot(r.sampling_se, r.log_z.se);
    return r;
}

// ---------------------------------------------------------------------------
// KL bounds

/// The two published statements of the bound differ; both are kept.
enum class BoundVariant { appendix, main_text };

struct Bounds {
    double lower = 0.0;
    double upper = 0.0;
    double effective_lower() const { return std::max(0.0, lower); }
};

inline Bounds gs_kl_bounds(int k, double tau, double x_min, BoundVariant variant) {
    if (k < 2) throw DomainError("gs_kl_bounds: K must be at least 2");
    if (!(tau > 0.0)) throw DomainError("gs_kl_bounds: tau must be positive");
    if (!(x_min > 0.0) || !(x_min < 1.0)) throw DomainError("gs_kl_bounds: x_min must lie in (0, 1)");
    const double K = k;
    const double lg = std::lgamma(K);  // log Gamma(K) = log (K-1)!
    const double lt = std::log(tau);
    const double lm = std::log(x_min);
    const double l1m = std::log1p(-x_min);
    Bounds b;
    if (variant == BoundVariant::appendix) {
        b.upper = -K * (tau + 1.0) * lm + (K - 1.0) * lt + (K - 1.0) * l1m + lg + K * (l1m - lg);
        b.lower = K * tau * lm + (K - 1.0) * lt + (K - 1.0) * lm + lg + K * (lm - lg);
    } else {
        b.upper = -K * (tau + 1.0) * l1m + (K - 1.0) * lt + (K - 1.0) * l1m + lg + K * (l1m - lg);
        b.lower = K * (tau + 1.0) * lm + (K - 1.0) * lt + (K - 1.0) * lm + lg - K * lg;
    }
    return b;
}

struct BoundReport {
    int k = 0;
    double tau = 0.0;
    double x_min = 0.0;
    Bounds appendix;
    Bounds main_text;
    KlEstimate estimate;

    // Absolute floor on the slack: when p_GS is exactly uniform the estimate is
    // zero up to roundoff and its standard error collapses with it.
    static constexpr double kRoundoff = 1e-12;

    bool within(const Bounds& b, double sigmas = 3.0) const {
        const double slack = sigmas * estimate.se + kRoundoff;
        return estimate.kl >= b.effective_lower() - slack && estimate.kl <= b.upper + slack;
    }
    bool appendix_satisfied() const { return within(appendix); }
    bool main_text_satisfied() const { return within(main_text); }
};

inline BoundReport bound_report(const Eigen::VectorXd& pi, double tau, double x_min, std::size_t n,
                                std::uint64_t seed, std::size_t logz_samples = 1000000) {
    const int k = static_cast<int>(pi.size());
    return {k,
            tau,
            x_min,
            gs_kl_bounds(k, tau, x_min, BoundVariant::appendix),
            gs_kl_bounds(k, tau, x_min, BoundVariant::main_text),
            mc_kl_estimate(pi, tau, n, seed, x_min, logz_samples)};
}

inline void write_bound_csv(std::ostream& out, const std::vector<BoundReport>& rows) {
    using data::format_double;
    out << "K,tau,x_min,n,kl,se,lower,upper,main_lower,main_upper,appendix_satisfied,main_satisfied\n";
    for (const auto& r : rows)
        out << r.k << ',' << format_double(r.tau) << ',' << format_double(r.x_min) << ',' << r.estimate.samples << ','
            << format_double(r.estimate.kl) << ',' << format_double(r.estimate.se) << ','
            << format_double(r.appendix.effective_lower()) << ',' << format_double(r.appendix.upper) << ','
            << format_double(r.main_text.effective_lower()) << ',' << format_double(r.main_text.upper) << ','
            << r.appendix_satisfied() << ',' << r.main_text_satisfied() << '\n';
}

// ---------------------------------------------------------------------------
// Softmax Jacobian bounds

/// dY_i/dz_j for Y = softmax((z + g) / tau): Y_i (delta_ij - Y_j) / tau.
inline Eigen::MatrixXd softmax_jacobian(const Eigen::VectorXd& y, double tau) {
    Eigen::MatrixXd j = -y * y.transpose();
    j.diagonal() += y;
    return j / tau;
}

struct GradBoundReport {
    double tau = 0.0;
    std::size_t samples = 0;
    double max_abs_entry = 0.0;
    double max_variance = 0.0;  // largest per-entry empirical variance
    double max_row_sum = 0.0;   // largest |sum_j J_ij|
    double entry_bound = 0.0;   // 1/(4 tau)
    double variance_bound = 0.0;
    bool entry_ok() const { return max_abs_entry <= entry_bound; }
    bool variance_ok() const { return max_variance < variance_bound; }
};

/// z ~ N(0, I_K) and standard Gumbel g per draw.
inline GradBoundReport softmax_grad_bound_check(double tau, std::size_t n, std::uint64_t seed, Eigen::Index k = 3) {
    if (!(tau > 0.0)) throw DomainError("softmax_grad_bound_check: tau must be positive");
    Rng rng(seed);
    GradBoundReport r;
    r.tau = tau;
    r.samples = n;
    r.entry_bound = 0.25 / tau;
    r.variance_bound = r.entry_bound * r.entry_bound;
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(k, k), m2 = Eigen::MatrixXd::Zero(k, k);
    for (std::size_t s = 0; s < n; ++s) {
        const Eigen::VectorXd z = rng.normal_vector(k);
        const Eigen::VectorXd y = diffusion::gumbel_softmax_sample(z, tau, rng.gumbel_vector(k));
        const Eigen::MatrixXd jac = softmax_jacobian(y, tau);
        r.max_abs_entry = std::max(r.max_abs_entry, jac.cwiseAbs().maxCoeff());
        r.max_row_sum = std::max(r.max_row_sum, jac.rowwise().sum().cwiseAbs().maxCoeff());
        const Eigen::MatrixXd delta = jac - mean;
        mean += delta / static_cast<double>(s + 1);
        m2 += delta.cwiseProduct(jac - mean);
    }
    if (n > 1) r.max_variance = (m2 / static_cast<double>(n - 1)).maxCoeff();
    return r;
}

// ---------------------------------------------------------------------------
// Toy simplex simulation

struct ToyModels {
    data::TabularSchema schema;
    diffusion::Denoiser denoiser;
    guidance::Classifier classifier;
};

/// One three-level categorical column with uniform levels; the label marks
/// level "c". Small enough to train in seconds.
inline ToyModels train_toy_simplex_models(std::uint64_t seed, std::size_t n = 3000, int epochs = 60, int steps = 100) {
    Rng rng(seed);
    data::RawTable t;
    t.header = {"c", "y"};
    const char* levels[] = {"a", "b", "c"};
    for (std::size_t i = 0; i < n; ++i) {
        const auto lvl = rng.index(3);
        t.rows.push_back({levels[lvl], lvl == 2 ? "1" : "0"});
    }
    const auto schema = data::fit_schema(t, data::infer_manifest(t, "y"));
    const auto ds = data::to_dataset(schema, t);
    const auto batch = data::encode(schema, ds);
    const auto layout = schema.layout();
    diffusion::DiffusionTrainConfig dcfg;
    dcfg.hidden = {64, 64};
    dcfg.epochs = epochs;
    dcfg.seed = derive_seed(seed, 1);
    auto dres = diffusion::train_diffusion(batch.features, layout, diffusion::build_schedule(steps), dcfg);
    guidance::ClassifierTrainConfig ccfg;
    ccfg.hidden = {16, 16};
    ccfg.epochs = 20;
    ccfg.seed = derive_seed(seed, 2);
    auto cres = guidance::train_classifier(batch, batch, ccfg);
    return {schema, std::move(dres.denoiser), std::move(cres.classifier)};
}

struct SimplexPoint {
    std::size_t point = 0;
    int step = 0;
    Eigen::Vector3d p;
};

/// Reverse process for a single K = 3 block from the prior, with or without
/// guidance toward `target`.
inline std::vector<SimplexPoint> simplex_trajectory_sim(const diffusion::Denoiser& d, const guidance::Classifier* clf,
                                                        std::uint64_t seed, std::size_t n_points, int target = 1,
                                                        double lambda = 5.0, double tau = 0.5) {
    if (d.layout.dim != 3 || d.layout.num_dim != 0 || d.layout.blocks.size() != 1)
        throw ShapeError("simplex_trajectory_sim: model must have exactly one 3-level categorical block");
    std::vector<std::vector<guidance::TrajectoryStep>> traj;
    guidance::sample_unconditional(d, static_cast<Eigen::Index>(n_points), seed, tau, clf, target, lambda, &traj);
    std::vector<SimplexPoint> out;
    for (std::size_t i = 0; i < traj.size(); ++i)
        for (const auto& st : traj[i]) out.push_back({i, st.step, st.state});
    return out;
}

inline void write_simplex_csv(std::ostream& out, const std::vector<SimplexPoint>& pts, const std::string& mode) {
    out << "mode,point,step,p0,p1,p2\n";
    for (const auto& p : pts)
        out << mode << ',' << p.point << ',' << p.step << ',' << data::format_double(p.p(0)) << ','
            << data::format_double(p.p(1)) << ',' << data::format_double(p.p(2)) << '\n';
}

}  // namespace tdce::theory
