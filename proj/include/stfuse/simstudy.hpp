#pragma once

// Replication study over simulation scenarios: for each (scenario, replication)
// one data set is simulated and every requested model is fitted to the same
// draw, so model comparisons are paired. Evaluation covers posterior-sample
// bias/RMSE per parameter and per-day prediction RMSE at held-out locations.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <numbers>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "stfuse/core.hpp"
#include "stfuse/inference.hpp"
#include "stfuse/model.hpp"

namespace stfuse {

// The canonical 12-scenario grid: scenarios vary the number of daily in situ
// sites {5, 30}, the satellite missingness {50%, 80%}, and the inner mesh
// pitch {0.15, 0.1, 0.05}, in that nesting order. Everything else comes from
// `base`, so reduced-scale variants can override the mesh pitch afterwards.
inline ScenarioConfig scenario_config(int id, ScenarioConfig base = {}) {
    if (id < 1 || id > 12) throw ConfigError(strf("scenario_config: id %d outside 1..12", id));
    base.n_insitu = (id % 2 == 1) ? 5 : 30;
    base.missing_pct = (((id - 1) / 2) % 2 == 0) ? 0.5 : 0.8;
    const double inner[3] = {0.15, 0.1, 0.05};
    base.max_edge_inner = inner[(id - 1) / 4];
    return base;
}

struct ParamMetric {
    double bias = 0.0;
    double rmse = 0.0;
};

// Bias and RMSE of a parameter against its generative truth, computed over
// posterior draws from one fitted replication.
inline ParamMetric compute_param_metrics(const std::vector<double>& samples, double truth) {
    if (samples.empty()) throw ConfigError("compute_param_metrics: no samples");
    double sum = 0.0, sum_sq = 0.0;
    for (double s : samples) {
        sum += s - truth;
        sum_sq += (s - truth) * (s - truth);
    }
    const double n = static_cast<double>(samples.size());
    return {sum / n, std::sqrt(sum_sq / n)};
}

// Per-day prediction RMSE over the held-out locations. Both matrices are
// n_pred x T with matching layouts.
inline std::vector<double> compute_pred_rmse(const Eigen::MatrixXd& pred,
                                             const Eigen::MatrixXd& truth) {
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
        throw ConfigError(strf("compute_pred_rmse: shape mismatch %ldx%ld vs %ldx%ld",
                               static_cast<long>(pred.rows()), static_cast<long>(pred.cols()),
                               static_cast<long>(truth.rows()), static_cast<long>(truth.cols())));
    }
    if (pred.rows() == 0) throw ConfigError("compute_pred_rmse: no locations");
    std::vector<double> out(static_cast<std::size_t>(pred.cols()));
    for (Eigen::Index t = 0; t < pred.cols(); ++t) {
        out[static_cast<std::size_t>(t)] =
            std::sqrt((pred.col(t) - truth.col(t)).squaredNorm() / static_cast<double>(pred.rows()));
    }
    return out;
}

// Restricts an observation set to days 1..train_days while keeping the model
// horizon T, so days past the cut are forecast from the latent dynamics alone.
inline ObservationSet training_subset(const ObservationSet& obs, int train_days) {
    if (train_days < 1 || train_days > obs.T) {
        throw ConfigError("training_subset: train_days outside 1..T");
    }
    ObservationSet out;
    out.T = obs.T;
    out.center = obs.center;
    for (const auto& row : obs.insitu) {
        if (row.t <= train_days) out.insitu.push_back(row);
    }
    for (const auto& row : obs.satellite) {
        if (row.t <= train_days) out.satellite.push_back(row);
    }
    return out;
}

struct MetricsRecord {
    int scenario_id = 0;
    ModelKind kind = ModelKind::fusion;
    int replication = 0;  // 1-based
    bool failed = false;
    std::string error;
    std::vector<std::pair<std::string, ParamMetric>> params;
    std::vector<double> pred_rmse;  // one entry per day 1..T
    double seconds = 0.0;
};

struct AggregateCell {
    int scenario_id = 0;
    ModelKind kind = ModelKind::fusion;
    int n_ok = 0;
    int n_failed = 0;
    std::vector<std::pair<std::string, ParamMetric>> params;  // means over replications
    std::vector<double> pred_rmse;                            // mean per day
    double train_rmse = 0.0;  // mean of pred_rmse over days 1..train_days
    double test_rmse = 0.0;   // mean over days train_days+1..T
    double seconds = 0.0;     // mean wall clock per fit
};

struct StudyResult {
    std::vector<MetricsRecord> records;
    std::vector<AggregateCell> aggregate;
};

struct StudyConfig {
    std::vector<std::pair<int, ScenarioConfig>> scenarios;  // (scenario id, config)
    std::vector<ModelKind> models{ModelKind::fusion, ModelKind::insitu, ModelKind::satellite};
    PriorSpec prior{};
    OptimizerConfig optimizer{};
    int workers = 1;
    double max_fail_fraction = 0.2;  // per (scenario, model) cell

    void validate() const {
        if (scenarios.empty()) throw ConfigError("StudyConfig: no scenarios");
        if (models.empty()) throw ConfigError("StudyConfig: no models");
        if (workers < 1) throw ConfigError("StudyConfig: workers must be >= 1");
        for (const auto& [id, cfg] : scenarios) {
            (void)id;
            cfg.validate();
        }
    }
};

// Failure policy for one (scenario, model) cell: occasional non-convergence
// is recorded and skipped, but a cell that mostly fails has no meaningful
// aggregate and aborts the study.
inline void check_cell_failures(int n_failed, int n_total, int scenario_id, ModelKind kind,
                                double max_fraction = 0.2) {
    if (n_failed > max_fraction * n_total) {
        throw StudyError(strf("scenario %d %s: %d of %d replications failed to fit", scenario_id,
                              to_string(kind), n_failed, n_total));
    }
}

namespace detail {

// The parameters evaluated per model, with the truth each posterior targets.
// The satellite model cannot separate the additive bias from the intercept,
// so its intercept is referenced against beta0 + a; the bias itself is only
// estimable under fusion.
struct ParamTruth {
    std::string name;
    double truth;
};

inline std::vector<ParamTruth> param_truths(ModelKind kind, const ScenarioConfig& cfg) {
    std::vector<ParamTruth> out;
    const double b0 = cfg.beta[0] + (kind == ModelKind::satellite ? cfg.bias_a : 0.0);
    out.push_back({"beta0", b0});
    out.push_back({"beta1", cfg.beta[1]});
    out.push_back({"beta2", cfg.beta[2]});
    if (kind == ModelKind::fusion) out.push_back({"a", cfg.bias_a});
    out.push_back({"rho", cfg.truth.rho});
    if (kind != ModelKind::insitu) out.push_back({"tau1", cfg.truth.tau1});
    if (kind != ModelKind::satellite) out.push_back({"tau2", cfg.truth.tau2});
    out.push_back({"kappa", cfg.truth.kappa});
    out.push_back({"sigma2_omega", cfg.truth.sigma2_omega()});
    return out;
}

inline std::vector<double> param_draws(const std::string& name, const PosteriorSamples& samples) {
    const auto n = static_cast<std::size_t>(samples.theta.size());
    std::vector<double> out(n);
    int fixed_row = -1;
    if (name == "beta0") fixed_row = 0;
    else if (name == "beta1") fixed_row = 1;
    else if (name == "beta2") fixed_row = 2;
    else if (name == "a") fixed_row = 3;
    if (fixed_row >= 0) {
        for (std::size_t k = 0; k < n; ++k) {
            out[k] = samples.fixed(fixed_row, static_cast<Eigen::Index>(k));
        }
        return out;
    }
    for (std::size_t k = 0; k < n; ++k) {
        const Hyperparams& h = samples.theta[k];
        if (name == "rho") out[k] = h.rho;
        else if (name == "tau1") out[k] = h.tau1;
        else if (name == "tau2") out[k] = h.tau2;
        else if (name == "kappa") out[k] = h.kappa;
        else if (name == "sigma2_omega") out[k] = h.sigma2_omega();
        else throw ConfigError("param_draws: unknown parameter " + name);
    }
    return out;
}

// One (scenario, replication, model) evaluation: fit on the training days,
// sample the posterior for parameter metrics, and predict every day at the
// held-out locations.
inline MetricsRecord evaluate_cell(int scenario_id, const ScenarioConfig& cfg,
                                   const ScenarioGeometry& geo, const SimulationDraw& draw,
                                   const ObservationSet& train, ModelKind kind, int model_index,
                                   int replication, std::uint64_t rep_seed, const PriorSpec& prior,
                                   const OptimizerConfig& opt) {
    MetricsRecord rec;
    rec.scenario_id = scenario_id;
    rec.kind = kind;
    rec.replication = replication;

    const auto t0 = std::chrono::steady_clock::now();
    try {
        LinearGaussianSystem sys = assemble(kind, train, geo.mesh, geo.blocks,
                                            Hyperparams::from_theta({0, 0, 0, 0, 0}), geo.spatial);
        FitResult fr = fit(sys, prior, opt);

        const std::uint64_t samp_seed =
            Rng(rep_seed).substream(rngstream::fit_sampling + static_cast<std::uint64_t>(model_index))
                .seed();
        PosteriorSamples samples = sample_posterior(fr, cfg.n_samp, samp_seed);
        for (const auto& pt : param_truths(kind, cfg)) {
            rec.params.emplace_back(pt.name, compute_param_metrics(param_draws(pt.name, samples),
                                                                   pt.truth));
        }

        std::vector<PredictTarget> targets;
        targets.reserve(draw.pred_locations.size() * static_cast<std::size_t>(cfg.T));
        for (std::size_t l = 0; l < draw.pred_locations.size(); ++l) {
            for (int t = 1; t <= cfg.T; ++t) {
                targets.push_back(PredictTarget::at(draw.pred_locations[l], t));
            }
        }
        const auto rows = predict(fr, geo.mesh, geo.blocks, targets);
        Eigen::MatrixXd pred(static_cast<Eigen::Index>(draw.pred_locations.size()), cfg.T);
        std::size_t k = 0;
        for (Eigen::Index l = 0; l < pred.rows(); ++l) {
            for (int t = 0; t < cfg.T; ++t) pred(l, t) = rows[k++].mean;
        }
        rec.pred_rmse = compute_pred_rmse(pred, draw.pred_truth);
    } catch (const FitError& e) {
        rec.failed = true;
        rec.error = e.what();
    } catch (const NumericalError& e) {
        rec.failed = true;
        rec.error = e.what();
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

}  // namespace detail

inline StudyResult run_study(const StudyConfig& study) {
    study.validate();

    struct Task {
        std::size_t scenario_index;
        int replication;  // 1-based
    };
    std::vector<Task> tasks;
    std::vector<ScenarioGeometry> geometries;
    geometries.reserve(study.scenarios.size());
    for (std::size_t si = 0; si < study.scenarios.size(); ++si) {
        const ScenarioConfig& cfg = study.scenarios[si].second;
        geometries.push_back(make_geometry(cfg));
        for (int j = 1; j <= cfg.n_sim; ++j) tasks.push_back({si, j});
    }

    // One task = one simulated draw evaluated under every model, so threads
    // never share mutable state; records land in preassigned slots to keep
    // the output order independent of scheduling.
    const std::size_t n_models = study.models.size();
    std::vector<MetricsRecord> records(tasks.size() * n_models);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t ti = next.fetch_add(1);
            if (ti >= tasks.size()) return;
            const Task& task = tasks[ti];
            const auto& [scenario_id, base_cfg] = study.scenarios[task.scenario_index];
            ScenarioConfig cfg = base_cfg;
            cfg.seed = base_cfg.seed + static_cast<std::uint64_t>(task.replication - 1);
            const ScenarioGeometry& geo = geometries[task.scenario_index];
            const SimulationDraw draw = simulate_scenario(cfg, geo);
            const ObservationSet train = training_subset(draw.obs, cfg.train_days);
            for (std::size_t mi = 0; mi < n_models; ++mi) {
                records[ti * n_models + mi] = detail::evaluate_cell(
                    scenario_id, cfg, geo, draw, train, study.models[mi], static_cast<int>(mi),
                    task.replication, cfg.seed, study.prior, study.optimizer);
            }
        }
    };
    const int n_workers = std::min<int>(study.workers, static_cast<int>(tasks.size()));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    StudyResult out;
    out.records = std::move(records);
    std::stable_sort(out.records.begin(), out.records.end(),
                     [](const MetricsRecord& a, const MetricsRecord& b) {
                         if (a.scenario_id != b.scenario_id) return a.scenario_id < b.scenario_id;
                         if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
                         return a.replication < b.replication;
                     });

    // Aggregate each (scenario, model) cell as the mean over successful
    // replications; abort if too many replications in one cell failed.
    for (const auto& [scenario_id, cfg] : study.scenarios) {
        for (ModelKind kind : study.models) {
            AggregateCell cell;
            cell.scenario_id = scenario_id;
            cell.kind = kind;
            for (const auto& rec : out.records) {
                if (rec.scenario_id != scenario_id || rec.kind != kind) continue;
                if (rec.failed) {
                    ++cell.n_failed;
                    continue;
                }
                if (cell.n_ok == 0) {
                    cell.params = rec.params;
                    for (auto& entry : cell.params) entry.second = ParamMetric{};
                    cell.pred_rmse.assign(rec.pred_rmse.size(), 0.0);
                }
                for (std::size_t p = 0; p < rec.params.size(); ++p) {
                    cell.params[p].second.bias += rec.params[p].second.bias;
                    cell.params[p].second.rmse += rec.params[p].second.rmse;
                }
                for (std::size_t t = 0; t < rec.pred_rmse.size(); ++t) {
                    cell.pred_rmse[t] += rec.pred_rmse[t];
                }
                cell.seconds += rec.seconds;
                ++cell.n_ok;
            }
            check_cell_failures(cell.n_failed, cell.n_ok + cell.n_failed, scenario_id, kind,
                                study.max_fail_fraction);
            const double n = static_cast<double>(cell.n_ok);
            for (auto& [name, pm] : cell.params) {
                (void)name;
                pm.bias /= n;
                pm.rmse /= n;
            }
            for (auto& v : cell.pred_rmse) v /= n;
            cell.seconds /= n;
            double train_sum = 0.0, test_sum = 0.0;
            for (int t = 0; t < cfg.T; ++t) {
                (t < cfg.train_days ? train_sum : test_sum) += cell.pred_rmse[static_cast<std::size_t>(t)];
            }
            cell.train_rmse = train_sum / cfg.train_days;
            cell.test_rmse = test_sum / (cfg.T - cfg.train_days);
            out.aggregate.push_back(std::move(cell));
        }
    }
    return out;
}

// Long-format CSV of the per-replication records; failures appear as a
// single row with metric "failed" so no sentinel values leak into metrics.
inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
    std::string out = "scenario,model,replication,metric,name,value\n";
    for (const auto& rec : records) {
        const std::string prefix =
            strf("%d,%s,%d,", rec.scenario_id, to_string(rec.kind), rec.replication);
        out += prefix + strf("failed,,%d\n", rec.failed ? 1 : 0);
        if (rec.failed) continue;
        for (const auto& [name, pm] : rec.params) {
            out += prefix + strf("bias,%s,%.17g\n", name.c_str(), pm.bias);
            out += prefix + strf("rmse,%s,%.17g\n", name.c_str(), pm.rmse);
        }
        for (std::size_t t = 0; t < rec.pred_rmse.size(); ++t) {
            out += prefix + strf("pred_rmse,%zu,%.17g\n", t + 1, rec.pred_rmse[t]);
        }
        out += prefix + strf("seconds,,%.17g\n", rec.seconds);
    }
    return out;
}

inline std::string aggregate_csv(const std::vector<AggregateCell>& aggregate) {
    std::string out = "scenario,model,metric,name,value\n";
    for (const auto& cell : aggregate) {
        const std::string prefix = strf("%d,%s,", cell.scenario_id, to_string(cell.kind));
        out += prefix + strf("n_ok,,%d\n", cell.n_ok);
        out += prefix + strf("n_failed,,%d\n", cell.n_failed);
        for (const auto& [name, pm] : cell.params) {
            out += prefix + strf("bias,%s,%.17g\n", name.c_str(), pm.bias);
            out += prefix + strf("rmse,%s,%.17g\n", name.c_str(), pm.rmse);
        }
        for (std::size_t t = 0; t < cell.pred_rmse.size(); ++t) {
            out += prefix + strf("pred_rmse,%zu,%.17g\n", t + 1, cell.pred_rmse[t]);
        }
        out += prefix + strf("train_rmse,,%.17g\n", cell.train_rmse);
        out += prefix + strf("test_rmse,,%.17g\n", cell.test_rmse);
        out += prefix + strf("seconds,,%.17g\n", cell.seconds);
    }
    return out;
}

}  // namespace stfuse
