#pragma once

// Hyperparameter inference for the linear Gaussian system: exact latent
// marginalization, simplex search for the hyperparameter posterior mode, a
// small curvature-scaled exploration grid around it, and prediction /
// posterior sampling built on the grid mixture.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "core.hpp"
#include "geometry.hpp"
#include "gmrf.hpp"
#include "model.hpp"

namespace stfuse {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Priors on the transformed hyperparameter scale. The correlation prior is
// a normal on log((1+rho)/(1-rho)); its 0.15 is read as a variance (the
// usual reading is ambiguous, so it is a knob here). Noise precisions get
// the conventional vague log-gamma.
struct PriorSpec {
    double fixed_sd = 100.0;      // fixed-effect (and bias) Gaussian sd
    double field_scale_sd = 1.0;  // sd for log tau_omega and log kappa
    double rho_var = 0.15;        // variance for the transformed correlation
    double loggamma_shape = 0.01;
    double loggamma_rate = 0.01;

    void validate() const {
        if (!(fixed_sd > 0.0) || !(field_scale_sd > 0.0) || !(rho_var > 0.0) ||
            !(loggamma_shape > 0.0) || !(loggamma_rate > 0.0)) {
            throw ConfigError("PriorSpec: all scales must be positive");
        }
    }

    // Density of Gamma(shape, rate) on the precision, written on y = log
    // precision (change of variables adds a factor e^y).
    double log_gamma_density(double y) const {
        const double a = loggamma_shape;
        const double b = loggamma_rate;
        return a * y - b * std::exp(y) + a * std::log(b) - std::lgamma(a);
    }

    static double log_normal_density(double x, double var) {
        return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * x * x / var;
    }

    double log_density(const std::array<double, Hyperparams::n>& th,
                       const std::array<bool, Hyperparams::n>& active) const {
        double lp = log_normal_density(th[0], field_scale_sd * field_scale_sd) +
                    log_normal_density(th[1], field_scale_sd * field_scale_sd) +
                    log_normal_density(th[2], rho_var);
        if (active[3]) lp += log_gamma_density(th[3]);
        if (active[4]) lp += log_gamma_density(th[4]);
        return lp;
    }
};

struct OptimizerConfig {
    int max_iter = 500;         // simplex iterations per run
    double tol = 1e-4;          // converged when the simplex value spread drops below this
    int max_restarts = 3;       // extra runs from the incumbent best
    double init_step = 0.5;     // initial simplex edge on the transformed scale
    double hessian_step = 0.05; // finite-difference step for curvature scaling
    bool use_grid = true;       // false: plug in the mode only
    double theta_bound = 35.0;  // reject |theta_i| beyond this (overflow guard)
};

struct ParamSummary {
    double mean = 0.0;
    double sd = 0.0;
    double q025 = 0.0;
    double q975 = 0.0;
};

struct GridPoint {
    Hyperparams theta;
    std::array<double, Hyperparams::n> theta_t{};
    double log_post = kNegInf;  // unnormalized log hyperparameter posterior
    double weight = 0.0;
    GaussianConditional latent;  // posterior of u given this theta
    // Retained factorization of the posterior precision (block solver).
    // Absent on hand-built results; consumers fall back to latent.precision.
    std::shared_ptr<const BlockTriCholesky> factor;
};

struct FitResult {
    ModelKind kind = ModelKind::fusion;
    std::array<bool, Hyperparams::n> active{};
    std::vector<GridPoint> grid;
    int mode_index = 0;
    std::vector<OptTracePoint> trace;
    std::vector<std::pair<std::string, ParamSummary>> summaries;
    // Layout bookkeeping copied from the fitted system.
    int G = 0;
    int T = 1;
    int p1 = 0;
    bool has_bias = false;
    Vec2 center;

    const GridPoint& mode() const { return grid.at(static_cast<std::size_t>(mode_index)); }

    const ParamSummary& summary(const std::string& name) const {
        for (const auto& [n, s] : summaries) {
            if (n == name) return s;
        }
        throw ConfigError(strf("FitResult: no summary named '%s'", name.c_str()));
    }
};

namespace detail {

// Standard normal CDF.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

struct MixComp {
    double w, mean, sd;
};

inline double mixture_cdf(const std::vector<MixComp>& comps, double x) {
    double f = 0.0;
    for (const auto& c : comps) {
        if (c.sd > 0.0) {
            f += c.w * norm_cdf((x - c.mean) / c.sd);
        } else if (x >= c.mean) {
            f += c.w;
        }
    }
    return f;
}

// Quantile of a Gaussian mixture by bisection on its CDF.
inline double mixture_quantile(const std::vector<MixComp>& comps, double p) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& c : comps) {
        lo = std::min(lo, c.mean - 12.0 * c.sd - 1.0);
        hi = std::max(hi, c.mean + 12.0 * c.sd + 1.0);
    }
    for (int it = 0; it < 200 && hi - lo > 1e-7 * (1.0 + std::abs(lo) + std::abs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        (mixture_cdf(comps, mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline ParamSummary mixture_summary(const std::vector<MixComp>& comps) {
    ParamSummary s;
    double m2 = 0.0;
    for (const auto& c : comps) {
        s.mean += c.w * c.mean;
        m2 += c.w * (c.sd * c.sd + c.mean * c.mean);
    }
    s.sd = std::sqrt(std::max(0.0, m2 - s.mean * s.mean));
    s.q025 = mixture_quantile(comps, 0.025);
    s.q975 = mixture_quantile(comps, 0.975);
    return s;
}

// Discrete weighted summary (used for the hyperparameters, which live only
// on the grid points).
inline ParamSummary discrete_summary(std::vector<std::pair<double, double>> vw) {
    ParamSummary s;
    double m2 = 0.0;
    for (const auto& [v, w] : vw) {
        s.mean += w * v;
        m2 += w * v * v;
    }
    s.sd = std::sqrt(std::max(0.0, m2 - s.mean * s.mean));
    std::sort(vw.begin(), vw.end());
    auto quant = [&](double p) {
        double cum = 0.0;
        for (const auto& [v, w] : vw) {
            cum += w;
            if (cum >= p - 1e-15) return v;
        }
        return vw.back().first;
    };
    s.q025 = quant(0.025);
    s.q975 = quant(0.975);
    return s;
}

}  // namespace detail

// Evaluates the exact log marginal likelihood and hyperparameter posterior
// for one assembled system, reusing symbolic factorizations across calls.
// The system is mutated (set_theta) on every evaluation and must outlive
// the evaluator; H and z must not change while it is in use.
class MarginalEvaluator {
public:
    explicit MarginalEvaluator(LinearGaussianSystem& sys, PriorSpec prior = {})
        : sys_(sys), prior_(prior), ht_(sys.H.transpose()) {
        prior_.validate();
        sys_.fixed_prior_sd = prior_.fixed_sd;
    }

    LinearGaussianSystem& system() { return sys_; }
    const PriorSpec& prior_spec() const { return prior_; }

    // log p(z | theta), exact up to solver tolerance. Uses the identity
    // log p(z) = log p(u) + log p(z|u) - log p(u|z), valid at any u; the
    // latent posterior mean makes the last quadratic vanish.
    double log_marginal(const Hyperparams& th) {
        Eval e = evaluate(th);
        if (!e.ok) throw NumericalError("log_marginal: posterior precision factorization failed");
        return e.lml;
    }

    // Same identity evaluated at an arbitrary latent point (each of the
    // three densities evaluated explicitly; used to test invariance).
    double log_marginal_at(const Hyperparams& th, const Eigen::VectorXd& u) {
        Eval e = evaluate(th);
        if (!e.ok) throw NumericalError("log_marginal_at: posterior precision factorization failed");
        if (u.size() != sys_.latent_dim()) throw ConfigError("log_marginal_at: latent size mismatch");
        const Eigen::Index n_u = sys_.latent_dim();
        const double log2pi = std::log(2.0 * std::numbers::pi);

        const double lp_u =
            0.5 * (e.logdet_prior - n_u * log2pi) - 0.5 * u.dot(sys_.prior.full() * u);
        Eigen::VectorXd r = sys_.z - sys_.H * u;
        const double lp_z_u = like_const() - 0.5 * r.dot(sys_.noise_prec.asDiagonal() * r);
        Eigen::VectorXd d = u - e.mean;
        const double lp_u_z =
            0.5 * (e.logdet_post - n_u * log2pi) - 0.5 * d.dot(post_full_ * d);
        return lp_u + lp_z_u - lp_u_z;
    }

    // Unnormalized log hyperparameter posterior on the transformed scale;
    // -inf outside bounds or when the factorization fails (the optimizer
    // treats that as an infinitely bad point).
    double log_posterior(const std::array<double, Hyperparams::n>& th_t, double bound = 35.0) {
        const auto active = sys_.active_theta();
        for (int i = 0; i < Hyperparams::n; ++i) {
            if (active[static_cast<std::size_t>(i)] &&
                std::abs(th_t[static_cast<std::size_t>(i)]) > bound) {
                return kNegInf;
            }
        }
        Eval e = evaluate(Hyperparams::from_theta(th_t));
        if (!e.ok) return kNegInf;
        return e.lml + prior_.log_density(th_t, active);
    }

    // Latent posterior at theta; the precision is returned unfactorized.
    GaussianConditional conditional(const Hyperparams& th) {
        Eval e = evaluate(th);
        if (!e.ok) throw NumericalError("conditional: posterior precision factorization failed");
        GaussianConditional cond;
        cond.precision = SparseSym(post_full_);
        cond.mean = std::move(e.mean);
        return cond;
    }

    // One evaluation that keeps everything a grid point needs: the log
    // marginal, the posterior mean, and the block factorization.
    struct Retained {
        double lml = kNegInf;
        GaussianConditional latent;
        std::shared_ptr<const BlockTriCholesky> factor;
    };

    std::optional<Retained> evaluate_retained(const Hyperparams& th) {
        auto factor = std::make_shared<BlockTriCholesky>();
        Eval e = evaluate(th, factor.get());
        if (!e.ok) return std::nullopt;
        Retained r;
        r.lml = e.lml;
        r.latent.precision = SparseSym(post_full_);
        r.latent.mean = std::move(e.mean);
        r.factor = std::move(factor);
        return r;
    }

private:
    struct Eval {
        bool ok = false;
        double lml = kNegInf;
        double logdet_post = 0.0;
        double logdet_prior = 0.0;
        Eigen::VectorXd mean;
    };

    double like_const() const {
        const Eigen::Index n = sys_.n_rows();
        return 0.5 * sys_.noise_prec.array().log().sum() -
               0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    }

    Eval evaluate(const Hyperparams& th, BlockTriCholesky* factor = nullptr) {
        Eval e;
        sys_.set_theta(th);

        // Prior log determinant through the Kronecker identity:
        // logdet(Q_T kron Q_S) = G logdet(Q_T) + T logdet(Q_S), with
        // det(Q_T) = 1 - rho^2 for the unit-innovation AR(1) precision.
        SparseSym q_s = (*sys_.spatial)(th.kappa, th.tau_omega);
        if (!qs_solver_.analyzed()) qs_solver_.analyze(q_s);
        if (!qs_solver_.factorize(q_s)) return e;
        const double logdet_qt = std::log1p(-th.rho * th.rho);
        const double fixed_prec = 1.0 / (sys_.fixed_prior_sd * sys_.fixed_prior_sd);
        e.logdet_prior = sys_.G * logdet_qt + sys_.T * qs_solver_.logdet() +
                         sys_.n_fixed() * std::log(fixed_prec);

        post_full_ = sys_.prior.full();
        if (sys_.n_rows() > 0) {
            SpMat htg = ht_ * sys_.noise_prec.asDiagonal();
            post_full_ = post_full_ + SpMat(htg * sys_.H);
        }
        BlockTriCholesky* bt = factor ? factor : &bt_;
        if (!bt->factorize(post_full_, sys_.G, sys_.T, sys_.n_fixed())) return e;
        e.logdet_post = bt->logdet();

        Eigen::VectorXd b(sys_.latent_dim());
        if (sys_.n_rows() > 0) {
            b = ht_ * (sys_.noise_prec.cwiseProduct(sys_.z));
        } else {
            b.setZero();
        }
        e.mean = bt->solve(b);

        const double quad_prior = e.mean.dot(sys_.prior.full() * e.mean);
        double quad_like = 0.0;
        if (sys_.n_rows() > 0) {
            Eigen::VectorXd r = sys_.z - sys_.H * e.mean;
            quad_like = r.dot(sys_.noise_prec.asDiagonal() * r);
        }
        e.lml = 0.5 * (e.logdet_prior - e.logdet_post) - 0.5 * quad_prior - 0.5 * quad_like +
                like_const();
        e.ok = true;
        return e;
    }

    LinearGaussianSystem& sys_;
    PriorSpec prior_;
    SpMat ht_;  // H transposed, column-major, fixed for the evaluator's life
    SpMat post_full_;
    BlockTriCholesky bt_;
    RepeatSolver qs_solver_;
};

// Latent posterior for the system's current theta:
//   precision = Q_prior + H^T diag(tau_row) H, mean = precision^{-1} H^T diag(tau_row) z.
// An observation-free system returns its prior.
inline GaussianConditional latent_posterior(const LinearGaussianSystem& sys) {
    GaussianConditional cond;
    SpMat p = sys.prior.full();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(sys.latent_dim());
    if (sys.n_rows() > 0) {
        SpMat ht = sys.H.transpose();
        SpMat htg = ht * sys.noise_prec.asDiagonal();
        p = p + SpMat(htg * sys.H);
        b = ht * (sys.noise_prec.cwiseProduct(sys.z));
    }
    cond.precision = SparseSym(p);
    cond.mean = cond.precision.solve(b);
    return cond;
}

inline double log_marginal_likelihood(LinearGaussianSystem& sys, const Hyperparams& th) {
    MarginalEvaluator ev(sys);
    return ev.log_marginal(th);
}

namespace detail {

// Plain Nelder-Mead on the reduced (active) coordinates, minimizing the
// negative log posterior. Appends every evaluation to the trace.
struct SimplexResult {
    std::vector<double> best;
    double best_value = kNegInf;  // log posterior at best
    bool converged = false;
};

template <typename F>
SimplexResult nelder_mead(F&& neg, std::vector<double> x0, double step, int max_iter, double tol) {
    const std::size_t d = x0.size();
    std::vector<std::vector<double>> pts(d + 1, x0);
    std::vector<double> f(d + 1);
    for (std::size_t i = 0; i < d; ++i) pts[i + 1][i] += step;
    for (std::size_t i = 0; i <= d; ++i) f[i] = neg(pts[i]);

    std::vector<std::size_t> order(d + 1);
    auto sort_simplex = [&] {
        for (std::size_t i = 0; i <= d; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
    };

    SimplexResult res;
    for (int it = 0; it < max_iter; ++it) {
        sort_simplex();
        const std::size_t best = order[0], worst = order[d], second = order[d - 1];
        const double spread = f[worst] - f[best];
        if (std::isfinite(f[best]) && spread < tol) {
            res.best = pts[best];
            res.best_value = -f[best];
            res.converged = true;
            return res;
        }

        std::vector<double> centroid(d, 0.0);
        for (std::size_t i = 0; i <= d; ++i) {
            if (i == worst) continue;
            for (std::size_t j = 0; j < d; ++j) centroid[j] += pts[i][j];
        }
        for (std::size_t j = 0; j < d; ++j) centroid[j] /= static_cast<double>(d);

        auto blend = [&](double coef) {
            std::vector<double> p(d);
            for (std::size_t j = 0; j < d; ++j) {
                p[j] = centroid[j] + coef * (pts[worst][j] - centroid[j]);
            }
            return p;
        };

        std::vector<double> refl = blend(-1.0);
        const double f_refl = neg(refl);
        if (f_refl < f[order[0]]) {
            std::vector<double> expa = blend(-2.0);
            const double f_expa = neg(expa);
            if (f_expa < f_refl) {
                pts[worst] = std::move(expa);
                f[worst] = f_expa;
            } else {
                pts[worst] = std::move(refl);
                f[worst] = f_refl;
            }
            continue;
        }
        if (f_refl < f[second]) {
            pts[worst] = std::move(refl);
            f[worst] = f_refl;
            continue;
        }
        std::vector<double> contr = blend(f_refl < f[worst] ? -0.5 : 0.5);
        const double f_contr = neg(contr);
        if (f_contr < std::min(f_refl, f[worst])) {
            pts[worst] = std::move(contr);
            f[worst] = f_contr;
            continue;
        }
        // Shrink toward the best point.
        for (std::size_t i = 0; i <= d; ++i) {
            if (i == best) continue;
            for (std::size_t j = 0; j < d; ++j) {
                pts[i][j] = pts[best][j] + 0.5 * (pts[i][j] - pts[best][j]);
            }
            f[i] = neg(pts[i]);
        }
    }
    sort_simplex();
    res.best = pts[order[0]];
    res.best_value = -f[order[0]];
    res.converged = false;
    return res;
}

// Evaluates a fixed set of hyperparameter grid points, normalizes their
// weights, and assembles the result with marginal summaries. Shared by fit()
// and by reconstruction of a stored fit from its grid.
inline FitResult fit_from_grid(LinearGaussianSystem& sys, MarginalEvaluator& ev,
                               const std::vector<std::array<double, Hyperparams::n>>& grid_theta,
                               double theta_bound, std::vector<OptTracePoint> trace) {
    const auto active = sys.active_theta();
    FitResult res;
    res.kind = sys.kind;
    res.active = active;
    res.G = sys.G;
    res.T = sys.T;
    res.p1 = sys.p1;
    res.has_bias = sys.has_bias;
    res.center = sys.center;
    for (const auto& th_t : grid_theta) {
        bool in_bounds = true;
        for (double v : th_t) in_bounds &= (std::abs(v) <= theta_bound);
        std::optional<MarginalEvaluator::Retained> ret;
        if (in_bounds) ret = ev.evaluate_retained(Hyperparams::from_theta(th_t));
        const double lp = ret ? ret->lml + ev.prior_spec().log_density(th_t, active) : kNegInf;
        trace.push_back(OptTracePoint{std::vector<double>(th_t.begin(), th_t.end()), lp});
        if (!ret || !std::isfinite(lp)) continue;  // grid point fell off a cliff: drop it
        GridPoint gp;
        gp.theta = Hyperparams::from_theta(th_t);
        gp.theta_t = th_t;
        gp.log_post = lp;
        gp.latent = std::move(ret->latent);
        gp.factor = std::move(ret->factor);
        res.grid.push_back(std::move(gp));
    }
    if (res.grid.empty()) {
        throw FitError("fit: no usable grid point (mode evaluation failed)", std::move(trace));
    }

    double max_lp = kNegInf;
    for (std::size_t k = 0; k < res.grid.size(); ++k) {
        if (res.grid[k].log_post > max_lp) {
            max_lp = res.grid[k].log_post;
            res.mode_index = static_cast<int>(k);
        }
    }
    double wsum = 0.0;
    for (auto& gp : res.grid) wsum += (gp.weight = std::exp(gp.log_post - max_lp));
    for (auto& gp : res.grid) gp.weight /= wsum;
    res.trace = std::move(trace);

    // Marginal summaries. Fixed effects and bias: Gaussian mixture across
    // grid points with exact per-point variances (solved columns of the
    // posterior precision). Hyperparameters: discrete weighted summaries.
    const Eigen::Index n_xi = static_cast<Eigen::Index>(sys.G) * sys.T;
    const int nf = sys.n_fixed();
    std::vector<std::vector<detail::MixComp>> fixed_mix(static_cast<std::size_t>(nf));
    for (const auto& gp : res.grid) {
        Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(sys.latent_dim(), nf);
        for (int j = 0; j < nf; ++j) rhs(n_xi + j, j) = 1.0;
        Eigen::MatrixXd cols = gp.factor ? gp.factor->solve(std::move(rhs))
                                         : gp.latent.precision.solve(rhs);
        for (int j = 0; j < nf; ++j) {
            const double var = std::max(0.0, cols(n_xi + j, j));
            fixed_mix[static_cast<std::size_t>(j)].push_back(
                detail::MixComp{gp.weight, gp.latent.mean[n_xi + j], std::sqrt(var)});
        }
    }
    for (int j = 0; j < sys.p1; ++j) {
        res.summaries.emplace_back(strf("beta%d", j),
                                   detail::mixture_summary(fixed_mix[static_cast<std::size_t>(j)]));
    }
    if (sys.has_bias) {
        res.summaries.emplace_back("a", detail::mixture_summary(fixed_mix[static_cast<std::size_t>(nf - 1)]));
    }
    const std::array<const char*, Hyperparams::n> names{"tau_omega", "kappa", "rho", "tau1", "tau2"};
    for (int i = 0; i < Hyperparams::n; ++i) {
        if (!active[static_cast<std::size_t>(i)]) continue;
        std::vector<std::pair<double, double>> vw;
        for (const auto& gp : res.grid) {
            const double v = (i == 0)   ? gp.theta.tau_omega
                             : (i == 1) ? gp.theta.kappa
                             : (i == 2) ? gp.theta.rho
                             : (i == 3) ? gp.theta.tau1
                                        : gp.theta.tau2;
            vw.emplace_back(v, gp.weight);
        }
        res.summaries.emplace_back(names[static_cast<std::size_t>(i)], detail::discrete_summary(std::move(vw)));
    }
    return res;
}

}  // namespace detail

// Mode search plus curvature-scaled axial grid. The returned grid carries
// normalized weights and a retained latent conditional per point.
inline FitResult fit(LinearGaussianSystem& sys, const PriorSpec& prior = {},
                     const OptimizerConfig& opt = {}) {
    if (sys.n_rows() < 1) throw ConfigError("fit: system has no observations");
    MarginalEvaluator ev(sys, prior);
    const auto active = sys.active_theta();
    std::vector<int> act_idx;
    for (int i = 0; i < Hyperparams::n; ++i) {
        if (active[static_cast<std::size_t>(i)]) act_idx.push_back(i);
    }
    const std::size_t d = act_idx.size();

    std::vector<OptTracePoint> trace;
    auto expand = [&](const std::vector<double>& x) {
        std::array<double, Hyperparams::n> th{};
        for (std::size_t j = 0; j < d; ++j) th[static_cast<std::size_t>(act_idx[j])] = x[j];
        return th;
    };
    auto neg = [&](const std::vector<double>& x) {
        const auto th = expand(x);
        const double lp = ev.log_posterior(th, opt.theta_bound);
        trace.push_back(OptTracePoint{std::vector<double>(th.begin(), th.end()), lp});
        return -lp;
    };

    // Simplex runs: start at the transformed-scale prior centers (all
    // zeros), restart from the incumbent with a smaller simplex if needed.
    std::vector<double> x0(d, 0.0);
    double step = opt.init_step;
    detail::SimplexResult sr;
    for (int run = 0; run <= opt.max_restarts; ++run) {
        sr = detail::nelder_mead(neg, x0, step, opt.max_iter, opt.tol);
        if (sr.converged) break;
        x0 = sr.best;
        step *= 0.5;
    }
    if (!sr.converged) {
        throw FitError(strf("fit: simplex did not converge after %d restarts (best log posterior %.6g)",
                            opt.max_restarts, sr.best_value),
                       std::move(trace));
    }

    // Curvature scaling from a diagonal finite-difference Hessian of the log
    // posterior at the mode; flat or indefinite directions fall back to 1.
    const double h = opt.hessian_step;
    const double lp0 = sr.best_value;
    std::vector<double> sigma(d, 1.0);
    if (opt.use_grid) {
        for (std::size_t j = 0; j < d; ++j) {
            std::vector<double> xp = sr.best, xm = sr.best;
            xp[j] += h;
            xm[j] -= h;
            const double lpp = -neg(xp);
            const double lpm = -neg(xm);
            const double curv = (lpp - 2.0 * lp0 + lpm) / (h * h);
            if (std::isfinite(curv) && curv < 0.0) sigma[j] = 1.0 / std::sqrt(-curv);
        }
    }

    // Grid: the mode plus one axial pair per active dimension.
    std::vector<std::array<double, Hyperparams::n>> grid_theta{expand(sr.best)};
    if (opt.use_grid) {
        for (std::size_t j = 0; j < d; ++j) {
            std::vector<double> xp = sr.best, xm = sr.best;
            xp[j] += sigma[j];
            xm[j] -= sigma[j];
            grid_theta.push_back(expand(xp));
            grid_theta.push_back(expand(xm));
        }
    }
    return detail::fit_from_grid(sys, ev, grid_theta, opt.theta_bound, std::move(trace));
}

// Reconstructs a full fit from externally supplied hyperparameter grid points
// (transformed scale), e.g. the grid stored in a saved fit file. Weights are
// recomputed from the evaluated log posteriors, so the result is identical to
// the fit that produced the grid.
inline FitResult rebuild_fit(LinearGaussianSystem& sys,
                             const std::vector<std::array<double, Hyperparams::n>>& grid_theta,
                             const PriorSpec& prior = {}, double theta_bound = 35.0) {
    if (grid_theta.empty()) throw ConfigError("rebuild_fit: empty hyperparameter grid");
    MarginalEvaluator ev(sys, prior);
    return detail::fit_from_grid(sys, ev, grid_theta, theta_bound, {});
}

// A prediction target: either the latent surface y(s, t) = x(s)'beta + xi_t(s)
// at a point (no observation noise), or a satellite block-day cell (bias and
// block noise included).
struct PredictTarget {
    SourceKind kind = SourceKind::point;
    Vec2 s;
    int block_id = 0;
    int t = 1;

    static PredictTarget at(Vec2 p, int t) { return PredictTarget{SourceKind::point, p, 0, t}; }
    static PredictTarget cell(int block_id, int t) {
        return PredictTarget{SourceKind::block, Vec2{}, block_id, t};
    }
};

struct PredictRow {
    PredictTarget target;
    double mean = 0.0;
    double sd = 0.0;
    double q025 = 0.0;
    double q975 = 0.0;
};

inline std::vector<PredictRow> predict(const FitResult& fit, const Mesh& mesh, const BlockSet& blocks,
                                       const std::vector<PredictTarget>& targets) {
    if (fit.grid.empty()) throw ConfigError("predict: empty fit grid");
    const Eigen::Index n_u = fit.grid.front().latent.dim();
    const Eigen::Index n_xi = static_cast<Eigen::Index>(fit.G) * fit.T;
    const Eigen::Index n_t = static_cast<Eigen::Index>(targets.size());

    // Block rows and block-averaged covariates, built once if needed.
    bool any_block = false;
    for (const auto& tg : targets) any_block |= (tg.kind == SourceKind::block);
    ProjMatrix ab;
    Eigen::MatrixXd xb;
    if (any_block) {
        ab = block_projection(mesh, blocks);
        xb = ab.mat * vertex_covariates(mesh, fit.center);
    }

    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index i = 0; i < n_t; ++i) {
        const auto& tg = targets[static_cast<std::size_t>(i)];
        if (tg.t < 1 || tg.t > fit.T) {
            throw ConfigError(strf("predict: target %ld has t=%d outside 1..%d", static_cast<long>(i + 1),
                                   tg.t, fit.T));
        }
        const Eigen::Index slab = static_cast<Eigen::Index>(tg.t - 1) * fit.G;
        if (tg.kind == SourceKind::point) {
            const auto loc = mesh.locate(tg.s);  // GeometryError if outside
            const auto& tri = mesh.triangles[static_cast<std::size_t>(loc.triangle)];
            for (int k = 0; k < 3; ++k) {
                if (loc.weights[static_cast<std::size_t>(k)] != 0.0) {
                    trips.emplace_back(static_cast<int>(i),
                                       static_cast<int>(slab + tri[static_cast<std::size_t>(k)]),
                                       loc.weights[static_cast<std::size_t>(k)]);
                }
            }
            const auto x = covariate_row(tg.s, fit.center);
            for (int j = 0; j < fit.p1; ++j) {
                trips.emplace_back(static_cast<int>(i), static_cast<int>(n_xi + j),
                                   x[static_cast<std::size_t>(j)]);
            }
        } else {
            if (tg.block_id < 1 || tg.block_id > static_cast<int>(blocks.size())) {
                throw ConfigError(strf("predict: block id %d outside 1..%zu", tg.block_id, blocks.size()));
            }
            const Eigen::Index b = tg.block_id - 1;
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(ab.mat, b); it; ++it) {
                trips.emplace_back(static_cast<int>(i), static_cast<int>(slab + it.col()), it.value());
            }
            for (int j = 0; j < fit.p1; ++j) {
                trips.emplace_back(static_cast<int>(i), static_cast<int>(n_xi + j), xb(b, j));
            }
            if (fit.has_bias) trips.emplace_back(static_cast<int>(i), static_cast<int>(n_u - 1), 1.0);
        }
    }
    SpMat rows(n_t, n_u);
    rows.setFromTriplets(trips.begin(), trips.end());
    SpMat rows_t = rows.transpose();

    // Per grid point: predictive mean h'mu and variance h'P^{-1}h (+ noise
    // for block cells), then a weighted Gaussian mixture per target.
    std::vector<std::vector<detail::MixComp>> mixes(static_cast<std::size_t>(n_t));
    for (const auto& gp : fit.grid) {
        Eigen::MatrixXd sol = gp.factor ? gp.factor->solve(Eigen::MatrixXd(rows_t))
                                        : gp.latent.precision.solve(Eigen::MatrixXd(rows_t));
        Eigen::VectorXd means = rows * gp.latent.mean;
        for (Eigen::Index i = 0; i < n_t; ++i) {
            double var = rows_t.col(i).dot(sol.col(i));
            if (targets[static_cast<std::size_t>(i)].kind == SourceKind::block) {
                var += 1.0 / gp.theta.tau1;
            }
            mixes[static_cast<std::size_t>(i)].push_back(
                detail::MixComp{gp.weight, means[i], std::sqrt(std::max(0.0, var))});
        }
    }

    std::vector<PredictRow> out;
    out.reserve(static_cast<std::size_t>(n_t));
    for (Eigen::Index i = 0; i < n_t; ++i) {
        PredictRow r;
        r.target = targets[static_cast<std::size_t>(i)];
        const ParamSummary s = detail::mixture_summary(mixes[static_cast<std::size_t>(i)]);
        r.mean = s.mean;
        r.sd = s.sd;
        r.q025 = s.q025;
        r.q975 = s.q975;
        out.push_back(r);
    }
    return out;
}

// Joint posterior draws: a grid point by weight, then a Gaussian draw of the
// latent vector from that point's conditional. Hyperparameter values are the
// chosen grid point's (discrete mixture).
struct PosteriorSamples {
    Eigen::MatrixXd fixed;  // n_fixed x n_samp: beta rows, then bias if present
    Eigen::MatrixXd field;  // (G*T) x n_samp when requested, else empty
    std::vector<Hyperparams> theta;
    std::vector<int> grid_index;
    bool has_bias = false;
};

inline PosteriorSamples sample_posterior(const FitResult& fit, int n_samp, std::uint64_t seed,
                                         bool include_field = false) {
    if (n_samp < 1) throw ConfigError("sample_posterior: n_samp must be >= 1");
    if (fit.grid.empty()) throw ConfigError("sample_posterior: empty fit grid");
    const Eigen::Index n_u = fit.grid.front().latent.dim();
    const Eigen::Index n_xi = static_cast<Eigen::Index>(fit.G) * fit.T;
    const int nf = static_cast<int>(n_u - n_xi);

    Rng root(seed);
    Rng pick = root.substream(1);
    std::vector<int> ks(static_cast<std::size_t>(n_samp));
    for (auto& k : ks) {
        const double u = pick.uniform();
        double cum = 0.0;
        k = static_cast<int>(fit.grid.size()) - 1;
        for (std::size_t j = 0; j < fit.grid.size(); ++j) {
            cum += fit.grid[j].weight;
            if (u <= cum) {
                k = static_cast<int>(j);
                break;
            }
        }
    }

    std::vector<int> counts(fit.grid.size(), 0);
    for (int k : ks) counts[static_cast<std::size_t>(k)]++;
    std::vector<Eigen::MatrixXd> draws(fit.grid.size());
    for (std::size_t j = 0; j < fit.grid.size(); ++j) {
        if (counts[j] == 0) continue;
        const GridPoint& gp = fit.grid[j];
        const std::uint64_t sub = root.substream(2 + static_cast<std::uint64_t>(j)).seed();
        if (gp.factor) {
            // x = mean + L^{-T} z gives cov (L L^T)^{-1} = P^{-1}.
            Rng rng(sub);
            Eigen::VectorXd z(n_u);
            draws[j].resize(n_u, counts[j]);
            for (int c = 0; c < counts[j]; ++c) {
                for (Eigen::Index i = 0; i < n_u; ++i) z[i] = rng.normal();
                draws[j].col(c) = gp.latent.mean + gp.factor->upper_solve(z);
            }
        } else {
            draws[j] = sample_gmrf(gp.latent, counts[j], sub);
        }
    }

    PosteriorSamples out;
    out.has_bias = fit.has_bias;
    out.fixed.resize(nf, n_samp);
    if (include_field) out.field.resize(n_xi, n_samp);
    out.theta.reserve(static_cast<std::size_t>(n_samp));
    out.grid_index = ks;
    std::vector<int> cursor(fit.grid.size(), 0);
    for (int i = 0; i < n_samp; ++i) {
        const int k = ks[static_cast<std::size_t>(i)];
        const Eigen::VectorXd& u = draws[static_cast<std::size_t>(k)].col(cursor[static_cast<std::size_t>(k)]++);
        out.fixed.col(i) = u.tail(nf);
        if (include_field) out.field.col(i) = u.head(n_xi);
        out.theta.push_back(fit.grid[static_cast<std::size_t>(k)].theta);
    }
    return out;
}

}  // namespace stfuse
