// Command line driver for the fusion library. Subcommands cover the full
// pipeline on one working directory: simulate writes observation CSVs, fit
// estimates the posterior and stores it as fit.json, predict and report read
// that file back, and study runs the replicated comparison across models.
//
// Exit codes: 0 success, 2 configuration or geometry problem, 3 numerical or
// fitting failure, 4 file I/O problem. Logging verbosity comes from the
// STFUSE_LOG environment variable (error, info, debug).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "stfuse/io.hpp"
#include "stfuse/report.hpp"

namespace fs = std::filesystem;
using namespace stfuse;

namespace {

struct Options {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = -1;
    std::string out_dir;
};

RunConfig load_config(const Options& o) {
    RunConfig rc = o.config_path.empty() ? RunConfig{} : read_run_config(o.config_path);
    if (o.seed_set) rc.seed = o.seed;
    if (o.workers >= 0) rc.workers = o.workers;
    if (!o.out_dir.empty()) rc.out_dir = o.out_dir;
    fs::create_directories(rc.out_dir);
    return rc;
}

std::string out_path(const RunConfig& rc, const char* name) {
    return (fs::path(rc.out_dir) / name).string();
}

// Loads the observation CSVs a model kind needs and the geometry they sit
// on. The block grid comes from grid.csv when satellite data is in play, so
// the fitted layout always matches the data files rather than the config.
struct LoadedData {
    ScenarioConfig cfg;
    ScenarioGeometry geo;
    ObservationSet obs;
};

LoadedData load_observations(const RunConfig& rc) {
    LoadedData d;
    d.cfg = rc.to_scenario();
    d.obs.T = d.cfg.T;
    d.obs.center = d.cfg.domain.centroid();
    if (rc.model != ModelKind::satellite) {
        d.obs.insitu = read_insitu_csv(out_path(rc, "insitu.csv"));
    }
    if (rc.model != ModelKind::insitu) {
        d.cfg.block_grid = read_grid_csv(out_path(rc, "grid.csv"));
        d.obs.satellite = read_satellite_csv(out_path(rc, "satellite.csv"));
    }
    d.geo = make_geometry(d.cfg);
    return d;
}

// Assembles the training system (observation days up to train_days) against
// freshly loaded data; fit and predict must agree on this exactly.
LinearGaussianSystem training_system(const RunConfig& rc, LoadedData& d) {
    ObservationSet train = training_subset(d.obs, d.cfg.train_days);
    fill_covariates(train, d.geo.mesh, d.geo.blocks);
    return assemble(rc.model, train, d.geo.mesh, d.geo.blocks,
                    Hyperparams::from_theta({0.0, 0.0, 0.0, 0.0, 0.0}), d.geo.spatial);
}

FitResult rebuild_from_file(const RunConfig& rc, LoadedData& d, const std::string& path) {
    const FitFile ff = read_fit_json(path);
    if (ff.kind != rc.model) {
        throw ConfigError(strf("%s was fitted with model \"%s\" but the config selects \"%s\"",
                               path.c_str(), to_string(ff.kind), to_string(rc.model)));
    }
    if (ff.G != d.geo.mesh.vertex_count() || ff.T != d.cfg.T) {
        throw ConfigError(strf("%s holds a %d-vertex, %d-day fit; current mesh and config give "
                               "%d vertices, %d days",
                               path.c_str(), ff.G, ff.T, d.geo.mesh.vertex_count(), d.cfg.T));
    }
    LinearGaussianSystem sys = training_system(rc, d);
    return rebuild_fit(sys, ff.grid_theta_t, rc.priors, rc.optimizer.theta_bound);
}

int cmd_mesh(const RunConfig& rc) {
    const ScenarioConfig cfg = rc.to_scenario();
    const ScenarioGeometry geo = make_geometry(cfg);
    write_mesh_csv(out_path(rc, "vertices.csv"), out_path(rc, "triangles.csv"), geo.mesh);
    log::info(strf("mesh: %d vertices, %zu triangles, %zu blocks -> vertices.csv, triangles.csv",
                   geo.mesh.vertex_count(), geo.mesh.triangles.size(), geo.blocks.size()));
    return 0;
}

int cmd_simulate(const RunConfig& rc) {
    const ScenarioConfig cfg = rc.to_scenario();
    const ScenarioGeometry geo = make_geometry(cfg);
    const SimulationDraw draw = simulate_scenario(cfg, geo);
    write_insitu_csv(out_path(rc, "insitu.csv"), draw.obs.insitu);
    write_satellite_csv(out_path(rc, "satellite.csv"), draw.obs.satellite);
    write_grid_csv(out_path(rc, "grid.csv"), cfg.block_grid);
    write_truth_csv(out_path(rc, "truth.csv"), draw.pred_locations, draw.pred_truth);
    log::info(strf("simulate: seed %llu, %zu in situ rows, %zu satellite rows, %zu held-out "
                   "locations over %d days",
                   static_cast<unsigned long long>(cfg.seed), draw.obs.insitu.size(),
                   draw.obs.satellite.size(), draw.pred_locations.size(), cfg.T));
    return 0;
}

int cmd_fit(const RunConfig& rc) {
    LoadedData d = load_observations(rc);
    LinearGaussianSystem sys = training_system(rc, d);
    log::info(strf("fit: %s model, %ld observation rows (days 1..%d), %d vertices, %d days",
                   to_string(rc.model), static_cast<long>(sys.n_rows()), d.cfg.train_days,
                   sys.G, sys.T));
    const FitResult fr = fit(sys, rc.priors, rc.optimizer);
    write_fit_json(out_path(rc, "fit.json"), fr);
    for (const auto& [name, s] : fr.summaries) {
        log::info(strf("fit: %-12s mean %10.4f  sd %9.4f  [%10.4f, %10.4f]", name.c_str(), s.mean,
                       s.sd, s.q025, s.q975));
    }
    log::info(strf("fit: %zu grid points -> fit.json", fr.grid.size()));
    return 0;
}

int cmd_predict(const RunConfig& rc) {
    LoadedData d = load_observations(rc);
    const FitResult fr = rebuild_from_file(rc, d, out_path(rc, "fit.json"));

    std::vector<PredictTarget> targets;
    std::size_t n_points = 0, n_cells = 0;
    const std::string truth_path = out_path(rc, "truth.csv");
    if (fs::exists(truth_path)) {
        const TruthTable tt = read_truth_csv(truth_path);
        for (const Vec2& s : tt.locations) {
            for (int t = 1; t <= d.cfg.T; ++t) targets.push_back(PredictTarget::at(s, t));
        }
        n_points = targets.size();
    }
    if (rc.model != ModelKind::insitu) {
        // Every block-day absent from the satellite file, including the
        // forecast days, gets a predictive distribution.
        std::set<std::pair<int, int>> seen;
        for (const SatRow& r : d.obs.satellite) seen.emplace(r.block_id, r.t);
        for (int b = 1; b <= static_cast<int>(d.geo.blocks.size()); ++b) {
            for (int t = 1; t <= d.cfg.T; ++t) {
                if (!seen.count({b, t})) {
                    targets.push_back(PredictTarget::cell(b, t));
                    ++n_cells;
                }
            }
        }
    }
    if (targets.empty()) {
        throw ConfigError("predict: nothing to predict (no truth.csv and no missing block-days)");
    }
    const auto rows = predict(fr, d.geo.mesh, d.geo.blocks, targets);
    write_predictions_csv(out_path(rc, "predictions.csv"), rows, d.geo.blocks);
    log::info(strf("predict: %zu point targets, %zu missing block-days -> predictions.csv",
                   n_points, n_cells));
    return 0;
}

int cmd_study(const RunConfig& rc) {
    StudyConfig sc;
    const ScenarioConfig base = rc.to_scenario();
    for (int id : rc.study_scenarios) {
        ScenarioConfig s = scenario_config(id, base);
        s.max_edge_inner *= rc.study_mesh_scale;
        s.max_edge_outer = std::max(s.max_edge_outer, s.max_edge_inner);
        sc.scenarios.emplace_back(id, s);
    }
    sc.models = rc.study_models;
    sc.prior = rc.priors;
    sc.optimizer = rc.optimizer;
    sc.workers = rc.workers > 0
                     ? rc.workers
                     : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
    sc.max_fail_fraction = rc.max_fail_fraction;
    log::info(strf("study: %zu scenarios x %zu models x %d replications, %d worker(s)",
                   sc.scenarios.size(), sc.models.size(), base.n_sim, sc.workers));
    const StudyResult res = run_study(sc);
    write_text_file(out_path(rc, "metrics.csv"), metrics_csv(res.records));
    write_text_file(out_path(rc, "aggregate.csv"), aggregate_csv(res.aggregate));
    std::size_t failed = 0;
    for (const auto& r : res.records) failed += r.failed ? 1 : 0;
    log::info(strf("study: %zu fits (%zu failed) -> metrics.csv, aggregate.csv", res.records.size(),
                   failed));
    return 0;
}

int cmd_report(const RunConfig& rc) {
    LoadedData d = load_observations(rc);
    const FitResult fr = rebuild_from_file(rc, d, out_path(rc, "fit.json"));
    const FieldMoments fm = field_moments(fr, d.geo.mesh);
    write_text_file(out_path(rc, "heatmap_mean.svg"),
                    heatmap_svg(d.geo.mesh, fm.mean, "posterior mean surface"));
    write_text_file(out_path(rc, "heatmap_sd.svg"),
                    heatmap_svg(d.geo.mesh, fm.sd, "posterior sd surface"));
    log::info("report: heatmap_mean.svg, heatmap_sd.svg");

    const std::string truth_path = out_path(rc, "truth.csv");
    const std::string pred_path = out_path(rc, "predictions.csv");
    if (fs::exists(truth_path) && fs::exists(pred_path)) {
        const TruthTable tt = read_truth_csv(truth_path);
        const auto rows = read_predictions_csv(pred_path);
        const auto rmse = rmse_by_day(rows, tt.locations, tt.values);
        write_text_file(out_path(rc, "rmse_by_day.csv"), rmse_by_day_csv(rmse));
        log::info(strf("report: rmse_by_day.csv (%zu days, training cutoff day %d)", rmse.size(),
                       d.cfg.train_days));
    } else {
        log::info("report: truth.csv or predictions.csv absent, skipping rmse_by_day.csv");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spatio-temporal fusion of point and block-average observations"};
    app.require_subcommand(1);
    app.fallthrough();

    Options opt;
    app.add_option("--config", opt.config_path, "JSON run configuration (defaults when omitted)");
    auto* seed_opt = app.add_option("--seed", opt.seed, "override the configured seed");
    app.add_option("--workers", opt.workers, "override the worker thread count");
    app.add_option("--out", opt.out_dir, "override the output/working directory");

    app.add_subcommand("mesh", "write the triangulation as vertices.csv and triangles.csv");
    app.add_subcommand("simulate", "draw a synthetic data set into the working directory");
    app.add_subcommand("fit", "estimate the posterior from the observation CSVs");
    app.add_subcommand("predict", "evaluate the stored fit at held-out points and missing cells");
    app.add_subcommand("study", "run the replicated simulation comparison across models");
    app.add_subcommand("report", "render heatmaps and per-day RMSE from the stored fit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    opt.seed_set = seed_opt->count() > 0;

    try {
        const RunConfig rc = load_config(opt);
        if (app.got_subcommand("mesh")) return cmd_mesh(rc);
        if (app.got_subcommand("simulate")) return cmd_simulate(rc);
        if (app.got_subcommand("fit")) return cmd_fit(rc);
        if (app.got_subcommand("predict")) return cmd_predict(rc);
        if (app.got_subcommand("study")) return cmd_study(rc);
        if (app.got_subcommand("report")) return cmd_report(rc);
        throw ConfigError("no subcommand selected");
    } catch (const IoError& e) {
        log::error(e.what());
        return 4;
    } catch (const NumericalError& e) {
        log::error(e.what());
        return 3;
    } catch (const FitError& e) {
        log::error(e.what());
        return 3;
    } catch (const StudyError& e) {
        log::error(e.what());
        return 3;
    } catch (const Error& e) {
        // ConfigError, DomainError, GeometryError and any future setup errors.
        log::error(e.what());
        return 2;
    } catch (const std::exception& e) {
        log::error(e.what());
        return 1;
    }
}
