#pragma once

// Observation models and data generation: the fused point + block linear
// Gaussian system over the latent field, and the synthetic-scenario
// simulator used by the study harness.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "core.hpp"
#include "geometry.hpp"
#include "gmrf.hpp"
#include "spde.hpp"

namespace stfuse {

enum class ModelKind : std::uint8_t { fusion, insitu, satellite };

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::fusion: return "fusion";
        case ModelKind::insitu: return "insitu";
        case ModelKind::satellite: return "satellite";
    }
    return "?";
}

inline ModelKind model_kind_from(const std::string& s) {
    if (s == "fusion") return ModelKind::fusion;
    if (s == "insitu") return ModelKind::insitu;
    if (s == "satellite") return ModelKind::satellite;
    throw ConfigError(strf("unknown model kind '%s' (expected fusion|insitu|satellite)", s.c_str()));
}

// Model hyperparameters and their unconstrained transformed view
//   theta = (log tau_omega, log kappa, log((1+rho)/(1-rho)), log tau1, log tau2).
struct Hyperparams {
    double tau_omega = 1.0;
    double kappa = 1.0;
    double rho = 0.0;
    double tau1 = 1.0;  // block-observation noise precision
    double tau2 = 1.0;  // point-observation noise precision

    static constexpr int n = 5;

    void validate() const {
        if (!(tau_omega > 0.0) || !(kappa > 0.0) || !(tau1 > 0.0) || !(tau2 > 0.0)) {
            throw ConfigError("Hyperparams: scales and precisions must be positive");
        }
        if (!(std::abs(rho) < 1.0)) {
            throw ConfigError(strf("Hyperparams: |rho| must be < 1, got %g", rho));
        }
    }

    std::array<double, n> to_theta() const {
        validate();
        return {std::log(tau_omega), std::log(kappa), std::log((1.0 + rho) / (1.0 - rho)),
                std::log(tau1), std::log(tau2)};
    }

    static Hyperparams from_theta(const std::array<double, n>& th) {
        Hyperparams h;
        h.tau_omega = std::exp(th[0]);
        h.kappa = std::exp(th[1]);
        h.rho = std::tanh(0.5 * th[2]);
        h.tau1 = std::exp(th[3]);
        h.tau2 = std::exp(th[4]);
        return h;
    }

    double sigma2_omega() const { return sigma2_from(kappa, tau_omega); }
};

struct InsituRow {
    int site_id = 0;  // 1-based
    Vec2 s;
    int t = 1;
    double value = 0.0;
    std::vector<double> x;  // covariate vector (intercept first)
};

struct SatRow {
    int block_id = 0;  // 1-based
    int t = 1;
    double value = 0.0;
    std::vector<double> x;
};

// Point and block observations over a common horizon. Missing satellite
// block-days are simply absent. Covariates are stored per row; center is the
// point used to demean the coordinate covariates.
struct ObservationSet {
    std::vector<InsituRow> insitu;
    std::vector<SatRow> satellite;
    int T = 1;
    Vec2 center;

    int n_covariates() const {  // p+1
        if (!insitu.empty()) return static_cast<int>(insitu.front().x.size());
        if (!satellite.empty()) return static_cast<int>(satellite.front().x.size());
        return 0;
    }

    void validate() const {
        if (T < 1) throw ConfigError("ObservationSet: T must be >= 1");
        const int pc = n_covariates();
        for (const auto& r : insitu) {
            if (r.t < 1 || r.t > T) {
                throw ConfigError(strf("ObservationSet: in situ row (site %d) has t=%d outside 1..%d",
                                       r.site_id, r.t, T));
            }
            if (static_cast<int>(r.x.size()) != pc) {
                throw ConfigError("ObservationSet: inconsistent covariate lengths");
            }
        }
        std::vector<std::pair<int, int>> seen;
        seen.reserve(satellite.size());
        for (const auto& r : satellite) {
            if (r.t < 1 || r.t > T) {
                throw ConfigError(strf("ObservationSet: satellite row (block %d) has t=%d outside 1..%d",
                                       r.block_id, r.t, T));
            }
            if (static_cast<int>(r.x.size()) != pc) {
                throw ConfigError("ObservationSet: inconsistent covariate lengths");
            }
            seen.emplace_back(r.t, r.block_id);
        }
        std::sort(seen.begin(), seen.end());
        if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
            throw ConfigError("ObservationSet: duplicate satellite (block, t) pair");
        }
    }
};

// Covariate vector at a location: (1, x - cx, y - cy).
inline std::vector<double> covariate_row(const Vec2& s, const Vec2& center) {
    return {1.0, s.x - center.x, s.y - center.y};
}

// Per-vertex covariate matrix, same layout.
inline Eigen::MatrixXd vertex_covariates(const Mesh& mesh, const Vec2& center) {
    Eigen::MatrixXd x(mesh.vertex_count(), 3);
    for (int i = 0; i < mesh.vertex_count(); ++i) {
        const Vec2& v = mesh.vertices[static_cast<std::size_t>(i)];
        x(i, 0) = 1.0;
        x(i, 1) = v.x - center.x;
        x(i, 2) = v.y - center.y;
    }
    return x;
}

// Fills per-row covariates: in situ rows use their exact location, satellite
// rows use the block-projection average of the vertex covariates (the same
// weights that map the latent field to the block).
inline void fill_covariates(ObservationSet& obs, const Mesh& mesh, const BlockSet& blocks) {
    const Eigen::MatrixXd xv = vertex_covariates(mesh, obs.center);
    ProjMatrix ab = block_projection(mesh, blocks);
    Eigen::MatrixXd xb = ab.mat * xv;  // per-block covariate averages
    for (auto& r : obs.insitu) r.x = covariate_row(r.s, obs.center);
    for (auto& r : obs.satellite) {
        if (r.block_id < 1 || r.block_id > static_cast<int>(blocks.size())) {
            throw ConfigError(strf("fill_covariates: block id %d outside 1..%zu", r.block_id, blocks.size()));
        }
        r.x.assign(xb.row(r.block_id - 1).begin(), xb.row(r.block_id - 1).end());
    }
}

// The assembled linear-Gaussian system z = H u + noise over the latent
// u = (xi_1..xi_T, beta, [a]). Satellite rows come first, then in situ rows,
// each sorted by (t, source id). The bias column exists only for the fusion
// model. noise_prec and prior correspond to the theta the system was last
// given; set_theta refreshes both without touching H or z.
struct LinearGaussianSystem {
    ModelKind kind = ModelKind::fusion;
    Eigen::VectorXd z;
    Eigen::SparseMatrix<double, Eigen::RowMajor> H;
    Eigen::VectorXd noise_prec;
    SparseSym prior;
    Hyperparams theta;
    std::vector<ProjRow> row_meta;
    int n_sat = 0;
    int n_ins = 0;
    int G = 0;
    int T = 1;
    int p1 = 3;  // number of fixed-effect covariates (p + 1)
    bool has_bias = false;
    Vec2 center;  // covariate centering point, kept for prediction
    std::shared_ptr<const SpatialPrecision> spatial;
    double fixed_prior_sd = 100.0;

    Eigen::Index n_rows() const { return z.size(); }
    Eigen::Index latent_dim() const {
        return static_cast<Eigen::Index>(G) * T + p1 + (has_bias ? 1 : 0);
    }
    int n_fixed() const { return p1 + (has_bias ? 1 : 0); }

    // Active hyperparameter dimensions: standalone models drop the noise
    // precision of the absent source.
    std::array<bool, Hyperparams::n> active_theta() const {
        std::array<bool, Hyperparams::n> on{true, true, true, true, true};
        if (kind == ModelKind::insitu) on[3] = false;     // no blocks: tau1 out
        if (kind == ModelKind::satellite) on[4] = false;  // no points: tau2 out
        return on;
    }

    void set_theta(const Hyperparams& th) {
        th.validate();
        theta = th;
        noise_prec.resize(n_rows());
        noise_prec.head(n_sat).setConstant(th.tau1);
        noise_prec.tail(n_ins).setConstant(th.tau2);

        SparseSym q_xi = kron_precision(precision_ar1(th.rho, T), (*spatial)(th.kappa, th.tau_omega));
        const Eigen::Index n_u = latent_dim();
        const Eigen::Index n_xi = static_cast<Eigen::Index>(G) * T;
        SpMat full(n_u, n_u);
        std::vector<Eigen::Triplet<double>> trips;
        const SpMat& ql = q_xi.lower();
        trips.reserve(static_cast<std::size_t>(ql.nonZeros()) + static_cast<std::size_t>(n_fixed()));
        for (int k = 0; k < ql.outerSize(); ++k) {
            for (SpMat::InnerIterator it(ql, k); it; ++it) {
                trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
            }
        }
        const double fixed_prec = 1.0 / (fixed_prior_sd * fixed_prior_sd);
        for (Eigen::Index i = n_xi; i < n_u; ++i) {
            trips.emplace_back(static_cast<int>(i), static_cast<int>(i), fixed_prec);
        }
        full.setFromTriplets(trips.begin(), trips.end());
        prior = SparseSym(full);
    }

    // Log prior density of the latent vector (Gaussian, mean zero). The
    // normalizing constant uses the closed Kronecker form
    //   logdet(Q_T kron Q_S) = G*logdet(Q_T) + T*logdet(Q_S)
    // to avoid factorizing the big prior.
    double log_prior(const Eigen::VectorXd& u, double logdet_qs, double logdet_qt) const {
        const Eigen::Index n_u = latent_dim();
        const double quad = u.dot(prior.full() * u);
        const double fixed_ld = -2.0 * n_fixed() * std::log(fixed_prior_sd);
        const double ld = G * logdet_qt + T * logdet_qs + fixed_ld;
        return 0.5 * (ld - quad) - 0.5 * static_cast<double>(n_u) * std::log(2.0 * std::numbers::pi);
    }
};

// Builds the system for one model kind at the given hyperparameters.
inline LinearGaussianSystem assemble(ModelKind kind, const ObservationSet& obs, const Mesh& mesh,
                                     const BlockSet& blocks, const Hyperparams& theta,
                                     std::shared_ptr<const SpatialPrecision> spatial = nullptr) {
    obs.validate();
    theta.validate();
    const bool want_sat = (kind != ModelKind::insitu);
    const bool want_ins = (kind != ModelKind::satellite);
    if ((want_sat && !want_ins && obs.satellite.empty()) ||
        (want_ins && !want_sat && obs.insitu.empty()) ||
        (want_sat && want_ins && obs.satellite.empty() && obs.insitu.empty())) {
        throw ConfigError(strf("assemble: no observations for model kind '%s'", to_string(kind)));
    }
    const int pc = obs.n_covariates();
    if (pc < 1) throw ConfigError("assemble: observation covariates missing (call fill_covariates)");

    LinearGaussianSystem sys;
    sys.kind = kind;
    sys.G = mesh.vertex_count();
    sys.T = obs.T;
    sys.p1 = pc;
    sys.has_bias = (kind == ModelKind::fusion);
    sys.center = obs.center;
    if (!spatial) spatial = std::make_shared<SpatialPrecision>(fem_matrices(mesh));
    sys.spatial = std::move(spatial);

    // Canonical row orders: satellite by (t, block), in situ by (t, site).
    std::vector<const SatRow*> sat;
    if (want_sat) {
        for (const auto& r : obs.satellite) sat.push_back(&r);
        std::sort(sat.begin(), sat.end(), [](const SatRow* a, const SatRow* b) {
            return std::make_pair(a->t, a->block_id) < std::make_pair(b->t, b->block_id);
        });
    }
    std::vector<const InsituRow*> ins;
    if (want_ins) {
        for (const auto& r : obs.insitu) ins.push_back(&r);
        std::sort(ins.begin(), ins.end(), [](const InsituRow* a, const InsituRow* b) {
            return std::make_pair(a->t, a->site_id) < std::make_pair(b->t, b->site_id);
        });
    }
    sys.n_sat = static_cast<int>(sat.size());
    sys.n_ins = static_cast<int>(ins.size());
    const Eigen::Index n_rows = sys.n_sat + sys.n_ins;

    // Spatial projections. Site list: unique ids, ascending, coordinates
    // checked for consistency across days.
    ProjMatrix a_sat_st, a_ins_st;
    if (sys.n_sat > 0) {
        ProjMatrix ab = block_projection(mesh, blocks);
        std::vector<std::pair<int, int>> observed;
        observed.reserve(sat.size());
        for (const SatRow* r : sat) {
            if (r->block_id < 1 || r->block_id > static_cast<int>(blocks.size())) {
                throw ConfigError(strf("assemble: block id %d outside 1..%zu", r->block_id, blocks.size()));
            }
            observed.emplace_back(r->t, r->block_id - 1);
        }
        a_sat_st = spacetime_blockdiag(ab, sys.T, observed);
    }
    if (sys.n_ins > 0) {
        std::vector<int> site_ids;
        std::vector<Vec2> site_pos;
        for (const InsituRow* r : ins) {
            auto it = std::lower_bound(site_ids.begin(), site_ids.end(), r->site_id);
            if (it == site_ids.end() || *it != r->site_id) {
                const auto idx = it - site_ids.begin();
                site_ids.insert(it, r->site_id);
                site_pos.insert(site_pos.begin() + idx, r->s);
            } else {
                const Vec2& have = site_pos[static_cast<std::size_t>(it - site_ids.begin())];
                if (have.x != r->s.x || have.y != r->s.y) {
                    throw ConfigError(strf("assemble: site %d has inconsistent coordinates", r->site_id));
                }
            }
        }
        ProjMatrix as = point_projection(mesh, site_pos);
        std::vector<std::pair<int, int>> observed;
        observed.reserve(ins.size());
        for (const InsituRow* r : ins) {
            const auto idx = std::lower_bound(site_ids.begin(), site_ids.end(), r->site_id) - site_ids.begin();
            observed.emplace_back(r->t, static_cast<int>(idx));
        }
        a_ins_st = spacetime_blockdiag(as, sys.T, observed);
        // Point rows keep their external site ids.
        for (std::size_t i = 0; i < a_ins_st.rows.size(); ++i) {
            a_ins_st.rows[i].id = site_ids[static_cast<std::size_t>(a_ins_st.rows[i].id) - 1];
        }
    }

    // H = [ A_spacetime | covariates | bias ], satellite block on top.
    const Eigen::Index n_xi = static_cast<Eigen::Index>(sys.G) * sys.T;
    const Eigen::Index n_u = n_xi + pc + (sys.has_bias ? 1 : 0);
    sys.H.resize(n_rows, n_u);
    sys.z.resize(n_rows);
    sys.row_meta.reserve(static_cast<std::size_t>(n_rows));

    std::vector<Eigen::Triplet<double>> trips;
    Eigen::Index row = 0;
    auto emit = [&](const Eigen::SparseMatrix<double, Eigen::RowMajor>& a, Eigen::Index local,
                    const std::vector<double>& x, double value, const ProjRow& meta, bool bias) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(a, local); it; ++it) {
            trips.emplace_back(static_cast<int>(row), static_cast<int>(it.col()), it.value());
        }
        for (int j = 0; j < pc; ++j) {
            if (x[static_cast<std::size_t>(j)] != 0.0) {
                trips.emplace_back(static_cast<int>(row), static_cast<int>(n_xi + j),
                                   x[static_cast<std::size_t>(j)]);
            }
        }
        if (bias) trips.emplace_back(static_cast<int>(row), static_cast<int>(n_u - 1), 1.0);
        sys.z[row] = value;
        sys.row_meta.push_back(meta);
        ++row;
    };

    // spacetime_blockdiag sorted rows exactly like `sat` / `ins`, so local
    // row indices line up one-to-one.
    for (Eigen::Index i = 0; i < sys.n_sat; ++i) {
        const SatRow* r = sat[static_cast<std::size_t>(i)];
        emit(a_sat_st.mat, i, r->x, r->value, a_sat_st.rows[static_cast<std::size_t>(i)], sys.has_bias);
    }
    for (Eigen::Index i = 0; i < sys.n_ins; ++i) {
        const InsituRow* r = ins[static_cast<std::size_t>(i)];
        emit(a_ins_st.mat, i, r->x, r->value, a_ins_st.rows[static_cast<std::size_t>(i)], false);
    }
    sys.H.setFromTriplets(trips.begin(), trips.end());
    sys.H.makeCompressed();

    sys.set_theta(theta);
    return sys;
}

// One simulation scenario: factor levels, truths, and bookkeeping. Defaults
// follow the synthetic study protocol (unit-square domain stand-in, 5x5 block
// grid of 0.2-pitch pixels, 19 days with 14 for training).
struct ScenarioConfig {
    int n_insitu = 30;
    double missing_pct = 0.5;
    double max_edge_inner = 0.05;
    double outer_pad = 0.2;
    double max_edge_outer = 0.2;
    int T = 19;
    int train_days = 14;
    int n_sim = 100;
    int n_samp = 100;
    int n_pred = 20;
    Hyperparams truth{0.08059851193539376, 7.0, 0.7, 50.0, 50.0};  // kappa=7, sigma2=0.25
    Eigen::Vector3d beta{0.0, -1.0, -1.0};
    double bias_a = 0.5;
    std::uint64_t seed = 1;
    bool noiseless = false;
    Polygon domain = Polygon::rectangle(0.0, 0.0, 1.0, 1.0);
    BlockSet::GridSpec block_grid{0.0, 0.0, 0.2, 0.2, 5, 5};

    void validate() const {
        truth.validate();
        if (n_insitu < 1) throw ConfigError("ScenarioConfig: n_insitu must be >= 1");
        if (missing_pct < 0.0 || missing_pct >= 1.0) {
            throw ConfigError("ScenarioConfig: missing_pct must be in [0, 1)");
        }
        if (T < 1 || train_days < 1 || train_days >= T) {
            throw ConfigError("ScenarioConfig: need 1 <= train_days < T");
        }
        if (n_sim < 1 || n_samp < 1 || n_pred < 1) {
            throw ConfigError("ScenarioConfig: n_sim, n_samp, n_pred must be >= 1");
        }
    }
};

struct ScenarioGeometry {
    Mesh mesh;
    BlockSet blocks;
    std::shared_ptr<const SpatialPrecision> spatial;
};

inline ScenarioGeometry make_geometry(const ScenarioConfig& cfg) {
    cfg.validate();
    ScenarioGeometry geo;
    geo.mesh = build_mesh(cfg.domain, cfg.max_edge_inner, cfg.outer_pad, cfg.max_edge_outer);
    geo.blocks = BlockSet::regular_grid(cfg.block_grid.x0, cfg.block_grid.y0, cfg.block_grid.dx,
                                        cfg.block_grid.dy, cfg.block_grid.nx, cfg.block_grid.ny);
    geo.spatial = std::make_shared<SpatialPrecision>(fem_matrices(geo.mesh));
    return geo;
}

// Everything a replication produces: the latent truth, the observations,
// and held-out evaluation locations with their true latent surface values.
struct SimulationDraw {
    Eigen::MatrixXd xi;          // G x T
    Eigen::Vector3d beta;
    double bias_a = 0.0;
    ObservationSet obs;
    std::vector<Vec2> pred_locations;
    Eigen::MatrixXd pred_truth;  // n_pred x T, latent y = x'beta + xi (no noise, no bias)
};

namespace rngstream {
inline constexpr std::uint64_t field = 1;
inline constexpr std::uint64_t sites = 2;
inline constexpr std::uint64_t insitu_noise = 3;
inline constexpr std::uint64_t satellite_noise = 4;
inline constexpr std::uint64_t missingness = 5;
inline constexpr std::uint64_t pred_locations = 6;
inline constexpr std::uint64_t fit_sampling = 7;
}  // namespace rngstream

inline SimulationDraw simulate_scenario(const ScenarioConfig& cfg, const ScenarioGeometry& geo) {
    cfg.validate();
    const Mesh& mesh = geo.mesh;
    const int g = mesh.vertex_count();
    const Rng root(cfg.seed);

    SimulationDraw draw;
    draw.beta = cfg.beta;
    draw.bias_a = cfg.bias_a;
    draw.obs.T = cfg.T;
    draw.obs.center = cfg.domain.centroid();

    // Latent field: stationary start, then AR(1) innovations. sample_gmrf
    // gives T independent innovation fields with covariance Q_S^{-1}.
    SparseSym q_s = (*geo.spatial)(cfg.truth.kappa, cfg.truth.tau_omega);
    GaussianConditional innov{Eigen::VectorXd::Zero(g), q_s};
    Eigen::MatrixXd omega = sample_gmrf(innov, cfg.T, root.substream(rngstream::field).seed());
    draw.xi.resize(g, cfg.T);
    const double rho = cfg.truth.rho;
    draw.xi.col(0) = omega.col(0) / std::sqrt(1.0 - rho * rho);
    for (int t = 1; t < cfg.T; ++t) {
        draw.xi.col(t) = rho * draw.xi.col(t - 1) + omega.col(t);
    }

    // Latent surface at vertices: y_t = X beta + xi_t.
    const Eigen::MatrixXd xv = vertex_covariates(mesh, draw.obs.center);
    Eigen::MatrixXd y = (xv * cfg.beta).replicate(1, cfg.T) + draw.xi;

    auto sample_in_domain = [&](Rng& rng) {
        const BBox bb = cfg.domain.bbox();
        for (int tries = 0; tries < 100000; ++tries) {
            Vec2 p{rng.uniform(bb.xmin, bb.xmax), rng.uniform(bb.ymin, bb.ymax)};
            if (cfg.domain.contains(p)) return p;
        }
        throw GeometryError("simulate_scenario: failed to sample a point inside the domain");
    };

    // Fixed in situ sites, drawn once.
    Rng site_rng = root.substream(rngstream::sites);
    std::vector<Vec2> sites;
    sites.reserve(static_cast<std::size_t>(cfg.n_insitu));
    for (int i = 0; i < cfg.n_insitu; ++i) sites.push_back(sample_in_domain(site_rng));
    ProjMatrix a_sites = point_projection(mesh, sites);

    const Eigen::MatrixXd site_vals = a_sites.mat * y;  // n_insitu x T
    Rng ins_noise = root.substream(rngstream::insitu_noise);
    const double sd2 = cfg.noiseless ? 0.0 : 1.0 / std::sqrt(cfg.truth.tau2);
    for (int t = 1; t <= cfg.T; ++t) {
        for (int i = 0; i < cfg.n_insitu; ++i) {
            InsituRow r;
            r.site_id = i + 1;
            r.s = sites[static_cast<std::size_t>(i)];
            r.t = t;
            r.value = site_vals(i, t - 1) + sd2 * ins_noise.normal();
            draw.obs.insitu.push_back(std::move(r));
        }
    }

    // Satellite block-days with independent Bernoulli missingness. Noise is
    // drawn for every cell before masking so the kept values do not depend
    // on the mask draws.
    ProjMatrix a_blocks = block_projection(mesh, geo.blocks);
    const Eigen::MatrixXd block_vals = a_blocks.mat * y;  // J x T
    Rng sat_noise = root.substream(rngstream::satellite_noise);
    Rng miss_rng = root.substream(rngstream::missingness);
    const double sd1 = cfg.noiseless ? 0.0 : 1.0 / std::sqrt(cfg.truth.tau1);
    const int J = static_cast<int>(geo.blocks.size());
    for (int t = 1; t <= cfg.T; ++t) {
        for (int j = 0; j < J; ++j) {
            const double noise = sat_noise.normal();
            const bool missing = miss_rng.uniform() < cfg.missing_pct;
            if (missing) continue;
            SatRow r;
            r.block_id = j + 1;
            r.t = t;
            r.value = cfg.bias_a + block_vals(j, t - 1) + sd1 * noise;
            draw.obs.satellite.push_back(std::move(r));
        }
    }

    fill_covariates(draw.obs, mesh, geo.blocks);

    // Held-out evaluation locations, disjoint from the sites.
    Rng pred_rng = root.substream(rngstream::pred_locations);
    draw.pred_locations.reserve(static_cast<std::size_t>(cfg.n_pred));
    while (static_cast<int>(draw.pred_locations.size()) < cfg.n_pred) {
        const Vec2 p = sample_in_domain(pred_rng);
        bool clash = false;
        for (const Vec2& s : sites) clash |= (s.x == p.x && s.y == p.y);
        if (!clash) draw.pred_locations.push_back(p);
    }
    ProjMatrix a_pred = point_projection(mesh, draw.pred_locations);
    draw.pred_truth.resize(cfg.n_pred, cfg.T);
    for (int t = 0; t < cfg.T; ++t) {
        draw.pred_truth.col(t) = a_pred.mat * y.col(t);
    }
    return draw;
}

inline SimulationDraw simulate_scenario(const ScenarioConfig& cfg) {
    return simulate_scenario(cfg, make_geometry(cfg));
}

}  // namespace stfuse
