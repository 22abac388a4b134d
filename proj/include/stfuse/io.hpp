#pragma once

// File formats and run configuration. CSV carries the observation and
// prediction tables (missing satellite cells are absent rows, never
// sentinels); fits are stored as versioned JSON holding the hyperparameter
// grid, which is enough to reconstruct the full posterior against the data.
// All floating-point output uses 17 significant digits so values round-trip
// exactly.

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stfuse/inference.hpp"
#include "stfuse/model.hpp"
#include "stfuse/simstudy.hpp"

namespace stfuse {

using ordered_json = nlohmann::ordered_json;

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for " + path);
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + path);
}

namespace csv {

// Minimal comma-separated tables: all fields numeric, no quoting. Errors
// carry file, line, and character column.
struct Table {
    std::string path;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::vector<std::size_t>> field_col;  // 1-based start column
    std::vector<std::size_t> line_no;                 // 1-based
};

inline Table read_table(const std::string& path, const std::vector<std::string>& want_header) {
    const std::string text = read_text_file(path);
    Table tab;
    tab.path = path;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string_view line(text.data() + pos, eol - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        ++line_no;
        if (!line.empty()) {
            std::vector<std::string> fields;
            std::vector<std::size_t> cols;
            std::size_t start = 0;
            for (;;) {
                std::size_t comma = line.find(',', start);
                const std::size_t end = (comma == std::string_view::npos) ? line.size() : comma;
                fields.emplace_back(line.substr(start, end - start));
                cols.push_back(start + 1);
                if (comma == std::string_view::npos) break;
                start = comma + 1;
            }
            if (tab.header.empty()) {
                tab.header = std::move(fields);
                if (!want_header.empty() && tab.header != want_header) {
                    std::string want;
                    for (const auto& h : want_header) want += (want.empty() ? "" : ",") + h;
                    throw IoError(strf("%s:1:1: expected header \"%s\"", path.c_str(), want.c_str()));
                }
            } else {
                if (fields.size() != tab.header.size()) {
                    throw IoError(strf("%s:%zu:1: expected %zu fields, got %zu", path.c_str(),
                                       line_no, tab.header.size(), fields.size()));
                }
                tab.rows.push_back(std::move(fields));
                tab.field_col.push_back(std::move(cols));
                tab.line_no.push_back(line_no);
            }
        }
        if (eol == text.size()) break;
        pos = eol + 1;
    }
    if (tab.header.empty()) throw IoError(strf("%s:1:1: empty file", path.c_str()));
    return tab;
}

inline double number_at(const Table& tab, std::size_t row, std::size_t col) {
    const std::string& f = tab.rows[row][col];
    const char* begin = f.c_str();
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0' || errno == ERANGE) {
        throw IoError(strf("%s:%zu:%zu: not a number: \"%s\"", tab.path.c_str(), tab.line_no[row],
                           tab.field_col[row][col], f.c_str()));
    }
    return v;
}

inline long int_at(const Table& tab, std::size_t row, std::size_t col) {
    const std::string& f = tab.rows[row][col];
    const char* begin = f.c_str();
    char* end = nullptr;
    errno = 0;
    const long v = std::strtol(begin, &end, 10);
    if (end == begin || *end != '\0' || errno == ERANGE) {
        throw IoError(strf("%s:%zu:%zu: not an integer: \"%s\"", tab.path.c_str(), tab.line_no[row],
                           tab.field_col[row][col], f.c_str()));
    }
    return v;
}

}  // namespace csv

// In situ observations: one row per site and day actually measured.
inline void write_insitu_csv(const std::string& path, const std::vector<InsituRow>& rows) {
    std::string out = "site_id,x,y,t,value\n";
    for (const auto& r : rows) {
        out += strf("%d,%.17g,%.17g,%d,%.17g\n", r.site_id, r.s.x, r.s.y, r.t, r.value);
    }
    write_text_file(path, out);
}

inline std::vector<InsituRow> read_insitu_csv(const std::string& path) {
    const auto tab = csv::read_table(path, {"site_id", "x", "y", "t", "value"});
    std::vector<InsituRow> rows;
    rows.reserve(tab.rows.size());
    for (std::size_t i = 0; i < tab.rows.size(); ++i) {
        InsituRow r;
        r.site_id = static_cast<int>(csv::int_at(tab, i, 0));
        r.s = {csv::number_at(tab, i, 1), csv::number_at(tab, i, 2)};
        r.t = static_cast<int>(csv::int_at(tab, i, 3));
        r.value = csv::number_at(tab, i, 4);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Satellite observations: missing block-days are simply absent.
inline void write_satellite_csv(const std::string& path, const std::vector<SatRow>& rows) {
    std::string out = "block_id,t,value\n";
    for (const auto& r : rows) out += strf("%d,%d,%.17g\n", r.block_id, r.t, r.value);
    write_text_file(path, out);
}

inline std::vector<SatRow> read_satellite_csv(const std::string& path) {
    const auto tab = csv::read_table(path, {"block_id", "t", "value"});
    std::vector<SatRow> rows;
    rows.reserve(tab.rows.size());
    for (std::size_t i = 0; i < tab.rows.size(); ++i) {
        SatRow r;
        r.block_id = static_cast<int>(csv::int_at(tab, i, 0));
        r.t = static_cast<int>(csv::int_at(tab, i, 1));
        r.value = csv::number_at(tab, i, 2);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Sidecar describing the satellite pixel grid; block_id is the row-major
// cell index (x fastest), 1-based.
inline void write_grid_csv(const std::string& path, const BlockSet::GridSpec& g) {
    write_text_file(path, strf("x0,y0,dx,dy,nx,ny\n%.17g,%.17g,%.17g,%.17g,%d,%d\n", g.x0, g.y0,
                               g.dx, g.dy, g.nx, g.ny));
}

inline BlockSet::GridSpec read_grid_csv(const std::string& path) {
    const auto tab = csv::read_table(path, {"x0", "y0", "dx", "dy", "nx", "ny"});
    if (tab.rows.size() != 1) {
        throw IoError(strf("%s:1:1: expected exactly one grid row, got %zu", path.c_str(),
                           tab.rows.size()));
    }
    BlockSet::GridSpec g;
    g.x0 = csv::number_at(tab, 0, 0);
    g.y0 = csv::number_at(tab, 0, 1);
    g.dx = csv::number_at(tab, 0, 2);
    g.dy = csv::number_at(tab, 0, 3);
    g.nx = static_cast<int>(csv::int_at(tab, 0, 4));
    g.ny = static_cast<int>(csv::int_at(tab, 0, 5));
    return g;
}

// Held-out truth of the latent surface at the prediction locations, one row
// per location and day.
struct TruthTable {
    std::vector<Vec2> locations;
    Eigen::MatrixXd values;  // n_locations x T
};

inline void write_truth_csv(const std::string& path, const std::vector<Vec2>& locations,
                            const Eigen::MatrixXd& values) {
    if (static_cast<Eigen::Index>(locations.size()) != values.rows()) {
        throw ConfigError("write_truth_csv: location count does not match value rows");
    }
    std::string out = "loc_id,x,y,t,value\n";
    for (std::size_t l = 0; l < locations.size(); ++l) {
        for (Eigen::Index t = 0; t < values.cols(); ++t) {
            out += strf("%zu,%.17g,%.17g,%ld,%.17g\n", l + 1, locations[l].x, locations[l].y,
                        static_cast<long>(t + 1), values(static_cast<Eigen::Index>(l), t));
        }
    }
    write_text_file(path, out);
}

inline TruthTable read_truth_csv(const std::string& path) {
    const auto tab = csv::read_table(path, {"loc_id", "x", "y", "t", "value"});
    long n_loc = 0, n_t = 0;
    for (std::size_t i = 0; i < tab.rows.size(); ++i) {
        n_loc = std::max(n_loc, csv::int_at(tab, i, 0));
        n_t = std::max(n_t, csv::int_at(tab, i, 3));
    }
    if (n_loc < 1 || n_t < 1 || tab.rows.size() != static_cast<std::size_t>(n_loc * n_t)) {
        throw IoError(strf("%s:1:1: expected a complete location-by-day table", path.c_str()));
    }
    TruthTable out;
    out.locations.assign(static_cast<std::size_t>(n_loc), Vec2{});
    out.values.resize(n_loc, n_t);
    for (std::size_t i = 0; i < tab.rows.size(); ++i) {
        const long l = csv::int_at(tab, i, 0) - 1;
        const long t = csv::int_at(tab, i, 3) - 1;
        out.locations[static_cast<std::size_t>(l)] = {csv::number_at(tab, i, 1),
                                                      csv::number_at(tab, i, 2)};
        out.values(l, t) = csv::number_at(tab, i, 4);
    }
    return out;
}

// Predictive mixture rows. Point targets carry coordinates and an empty
// block_id; block-day targets carry the block id and its centroid.
inline void write_predictions_csv(const std::string& path, const std::vector<PredictRow>& rows,
                                  const BlockSet& blocks) {
    std::string out = "kind,block_id,x,y,t,mean,sd,q025,q975\n";
    for (const auto& r : rows) {
        if (r.target.kind == SourceKind::point) {
            out += strf("point,,%.17g,%.17g,%d,%.17g,%.17g,%.17g,%.17g\n", r.target.s.x,
                        r.target.s.y, r.target.t, r.mean, r.sd, r.q025, r.q975);
        } else {
            const Vec2 c = blocks.blocks().at(static_cast<std::size_t>(r.target.block_id - 1)).centroid();
            out += strf("block,%d,%.17g,%.17g,%d,%.17g,%.17g,%.17g,%.17g\n", r.target.block_id, c.x,
                        c.y, r.target.t, r.mean, r.sd, r.q025, r.q975);
        }
    }
    write_text_file(path, out);
}

inline std::vector<PredictRow> read_predictions_csv(const std::string& path) {
    const auto tab =
        csv::read_table(path, {"kind", "block_id", "x", "y", "t", "mean", "sd", "q025", "q975"});
    std::vector<PredictRow> rows;
    rows.reserve(tab.rows.size());
    for (std::size_t i = 0; i < tab.rows.size(); ++i) {
        PredictRow r;
        const std::string& kind = tab.rows[i][0];
        if (kind == "point") {
            r.target.kind = SourceKind::point;
            r.target.s = {csv::number_at(tab, i, 2), csv::number_at(tab, i, 3)};
        } else if (kind == "block") {
            r.target.kind = SourceKind::block;
            r.target.block_id = static_cast<int>(csv::int_at(tab, i, 1));
        } else {
            throw IoError(strf("%s:%zu:%zu: unknown target kind \"%s\"", tab.path.c_str(),
                               tab.line_no[i], tab.field_col[i][0], kind.c_str()));
        }
        r.target.t = static_cast<int>(csv::int_at(tab, i, 4));
        r.mean = csv::number_at(tab, i, 5);
        r.sd = csv::number_at(tab, i, 6);
        r.q025 = csv::number_at(tab, i, 7);
        r.q975 = csv::number_at(tab, i, 8);
        rows.push_back(r);
    }
    return rows;
}

// Stored fit: parameter summary rows plus the hyperparameter grid. The grid
// thetas are sufficient to reconstruct the posterior exactly against the
// same data (see rebuild_fit), so the latent state itself is not stored.
inline constexpr int kFitSchemaVersion = 1;

struct FitFile {
    int schema_version = kFitSchemaVersion;
    ModelKind kind = ModelKind::fusion;
    int G = 0, T = 1, p1 = 0;
    bool has_bias = false;
    Vec2 center;
    int mode_index = 0;
    std::vector<std::array<double, Hyperparams::n>> grid_theta_t;
    std::vector<double> log_post;
    std::vector<double> weight;
    std::vector<std::pair<std::string, ParamSummary>> summaries;
};

inline void write_fit_json(const std::string& path, const FitResult& fit) {
    ordered_json j;
    j["schema_version"] = kFitSchemaVersion;
    j["model"] = to_string(fit.kind);
    j["G"] = fit.G;
    j["T"] = fit.T;
    j["p1"] = fit.p1;
    j["has_bias"] = fit.has_bias;
    j["center"] = {fit.center.x, fit.center.y};
    j["mode_index"] = fit.mode_index;
    ordered_json grid = ordered_json::array();
    for (const auto& gp : fit.grid) {
        ordered_json point;
        point["theta_t"] = gp.theta_t;
        point["log_post"] = gp.log_post;
        point["weight"] = gp.weight;
        grid.push_back(std::move(point));
    }
    j["grid"] = std::move(grid);
    ordered_json rows = ordered_json::array();
    for (const auto& [name, s] : fit.summaries) {
        ordered_json row;
        row["name"] = name;
        row["mean"] = s.mean;
        row["sd"] = s.sd;
        row["q025"] = s.q025;
        row["q975"] = s.q975;
        rows.push_back(std::move(row));
    }
    j["summaries"] = std::move(rows);
    write_text_file(path, j.dump(2) + "\n");
}

namespace detail {

// Converts a JSON parse error position into file:line:column.
inline IoError json_parse_error(const std::string& path, const std::string& text,
                                const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t stop = std::min(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < stop; ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return IoError(strf("%s:%zu:%zu: %s", path.c_str(), line, col, e.what()));
}

inline ordered_json parse_json_file(const std::string& path) {
    const std::string text = read_text_file(path);
    try {
        return ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw json_parse_error(path, text, e);
    }
}

// Strictness helper: every key in `obj` must be consumed by the caller.
inline void reject_unknown_keys(const ordered_json& obj, const std::vector<std::string>& allowed,
                                const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError(strf("config: unknown key \"%s\" in %s", key.c_str(), where.c_str()));
        }
    }
}

template <typename T>
void maybe_get(const ordered_json& obj, const char* key, T& out) {
    if (auto it = obj.find(key); it != obj.end()) out = it->get<T>();
}

}  // namespace detail

inline FitFile read_fit_json(const std::string& path) {
    const ordered_json j = detail::parse_json_file(path);
    try {
        FitFile f;
        f.schema_version = j.at("schema_version").get<int>();
        if (f.schema_version != kFitSchemaVersion) {
            throw ConfigError(strf("%s: unsupported fit schema version %d (expected %d)",
                                   path.c_str(), f.schema_version, kFitSchemaVersion));
        }
        f.kind = model_kind_from(j.at("model").get<std::string>());
        f.G = j.at("G").get<int>();
        f.T = j.at("T").get<int>();
        f.p1 = j.at("p1").get<int>();
        f.has_bias = j.at("has_bias").get<bool>();
        const auto c = j.at("center");
        f.center = {c.at(0).get<double>(), c.at(1).get<double>()};
        f.mode_index = j.at("mode_index").get<int>();
        for (const auto& point : j.at("grid")) {
            f.grid_theta_t.push_back(point.at("theta_t").get<std::array<double, Hyperparams::n>>());
            f.log_post.push_back(point.at("log_post").get<double>());
            f.weight.push_back(point.at("weight").get<double>());
        }
        for (const auto& row : j.at("summaries")) {
            ParamSummary s;
            s.mean = row.at("mean").get<double>();
            s.sd = row.at("sd").get<double>();
            s.q025 = row.at("q025").get<double>();
            s.q975 = row.at("q975").get<double>();
            f.summaries.emplace_back(row.at("name").get<std::string>(), s);
        }
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(strf("%s: %s", path.c_str(), e.what()));
    }
}

// One JSON document configuring every subcommand. Unknown keys are rejected,
// all fields default to the desk-scale study settings, and the document
// round-trips parse -> serialize -> parse unchanged. The spatial domain is a
// rectangle given as [x0, y0, width, height].
struct RunConfig {
    std::uint64_t seed = 1;
    ModelKind model = ModelKind::fusion;
    ScenarioConfig scenario = [] {
        ScenarioConfig c;
        c.n_sim = 20;            // desk-scale replication count
        c.max_edge_inner = 0.07; // ~300 vertex mesh on the unit square
        return c;
    }();
    std::array<double, 4> domain_rect{0.0, 0.0, 1.0, 1.0};
    PriorSpec priors{};
    OptimizerConfig optimizer{};
    std::vector<int> study_scenarios{10, 11};
    std::vector<ModelKind> study_models{ModelKind::fusion, ModelKind::insitu,
                                        ModelKind::satellite};
    // Multiplier applied to the canonical per-scenario mesh pitches in `study`
    // runs; 1.0 reproduces the published mesh sizes, the default keeps the
    // finest scenario near 300 vertices for desk-scale runs.
    double study_mesh_scale = 1.4;
    int workers = 0;  // 0: use the hardware concurrency
    double max_fail_fraction = 0.2;
    std::string out_dir = ".";

    ScenarioConfig to_scenario() const {
        ScenarioConfig c = scenario;
        c.seed = seed;
        c.domain = Polygon::rectangle(domain_rect[0], domain_rect[1], domain_rect[2], domain_rect[3]);
        return c;
    }
};

inline RunConfig run_config_from_json(const ordered_json& j) {
    RunConfig rc;
    detail::reject_unknown_keys(
        j, {"seed", "model", "mesh", "scenario", "priors", "optimizer", "study", "io"},
        "the top level");
    detail::maybe_get(j, "seed", rc.seed);
    if (j.contains("model")) rc.model = model_kind_from(j.at("model").get<std::string>());

    if (auto it = j.find("mesh"); it != j.end()) {
        const auto& m = *it;
        detail::reject_unknown_keys(m, {"max_edge_inner", "max_edge_outer", "outer_pad"}, "\"mesh\"");
        detail::maybe_get(m, "max_edge_inner", rc.scenario.max_edge_inner);
        detail::maybe_get(m, "max_edge_outer", rc.scenario.max_edge_outer);
        detail::maybe_get(m, "outer_pad", rc.scenario.outer_pad);
    }
    if (auto it = j.find("scenario"); it != j.end()) {
        const auto& s = *it;
        detail::reject_unknown_keys(
            s,
            {"n_insitu", "missing_pct", "T", "train_days", "n_sim", "n_samp", "n_pred", "truth",
             "beta", "bias_a", "noiseless", "domain", "block_grid"},
            "\"scenario\"");
        detail::maybe_get(s, "n_insitu", rc.scenario.n_insitu);
        detail::maybe_get(s, "missing_pct", rc.scenario.missing_pct);
        detail::maybe_get(s, "T", rc.scenario.T);
        detail::maybe_get(s, "train_days", rc.scenario.train_days);
        detail::maybe_get(s, "n_sim", rc.scenario.n_sim);
        detail::maybe_get(s, "n_samp", rc.scenario.n_samp);
        detail::maybe_get(s, "n_pred", rc.scenario.n_pred);
        detail::maybe_get(s, "bias_a", rc.scenario.bias_a);
        detail::maybe_get(s, "noiseless", rc.scenario.noiseless);
        if (auto t = s.find("truth"); t != s.end()) {
            detail::reject_unknown_keys(*t, {"tau_omega", "kappa", "rho", "tau1", "tau2"},
                                        "\"scenario.truth\"");
            detail::maybe_get(*t, "tau_omega", rc.scenario.truth.tau_omega);
            detail::maybe_get(*t, "kappa", rc.scenario.truth.kappa);
            detail::maybe_get(*t, "rho", rc.scenario.truth.rho);
            detail::maybe_get(*t, "tau1", rc.scenario.truth.tau1);
            detail::maybe_get(*t, "tau2", rc.scenario.truth.tau2);
        }
        if (auto b = s.find("beta"); b != s.end()) {
            const auto v = b->get<std::vector<double>>();
            if (v.size() != 3) throw ConfigError("config: \"scenario.beta\" must have 3 entries");
            rc.scenario.beta = Eigen::Vector3d(v[0], v[1], v[2]);
        }
        if (auto d = s.find("domain"); d != s.end()) {
            const auto v = d->get<std::vector<double>>();
            if (v.size() != 4) {
                throw ConfigError("config: \"scenario.domain\" must be [x0, y0, width, height]");
            }
            rc.domain_rect = {v[0], v[1], v[2], v[3]};
        }
        if (auto g = s.find("block_grid"); g != s.end()) {
            detail::reject_unknown_keys(*g, {"x0", "y0", "dx", "dy", "nx", "ny"},
                                        "\"scenario.block_grid\"");
            detail::maybe_get(*g, "x0", rc.scenario.block_grid.x0);
            detail::maybe_get(*g, "y0", rc.scenario.block_grid.y0);
            detail::maybe_get(*g, "dx", rc.scenario.block_grid.dx);
            detail::maybe_get(*g, "dy", rc.scenario.block_grid.dy);
            detail::maybe_get(*g, "nx", rc.scenario.block_grid.nx);
            detail::maybe_get(*g, "ny", rc.scenario.block_grid.ny);
        }
    }
    if (auto it = j.find("priors"); it != j.end()) {
        const auto& p = *it;
        detail::reject_unknown_keys(
            p, {"fixed_sd", "field_scale_sd", "rho_var", "loggamma_shape", "loggamma_rate"},
            "\"priors\"");
        detail::maybe_get(p, "fixed_sd", rc.priors.fixed_sd);
        detail::maybe_get(p, "field_scale_sd", rc.priors.field_scale_sd);
        detail::maybe_get(p, "rho_var", rc.priors.rho_var);
        detail::maybe_get(p, "loggamma_shape", rc.priors.loggamma_shape);
        detail::maybe_get(p, "loggamma_rate", rc.priors.loggamma_rate);
    }
    if (auto it = j.find("optimizer"); it != j.end()) {
        const auto& o = *it;
        detail::reject_unknown_keys(o,
                                    {"max_iter", "tol", "max_restarts", "init_step", "hessian_step",
                                     "use_grid", "theta_bound"},
                                    "\"optimizer\"");
        detail::maybe_get(o, "max_iter", rc.optimizer.max_iter);
        detail::maybe_get(o, "tol", rc.optimizer.tol);
        detail::maybe_get(o, "max_restarts", rc.optimizer.max_restarts);
        detail::maybe_get(o, "init_step", rc.optimizer.init_step);
        detail::maybe_get(o, "hessian_step", rc.optimizer.hessian_step);
        detail::maybe_get(o, "use_grid", rc.optimizer.use_grid);
        detail::maybe_get(o, "theta_bound", rc.optimizer.theta_bound);
    }
    if (auto it = j.find("study"); it != j.end()) {
        const auto& s = *it;
        detail::reject_unknown_keys(
            s, {"scenarios", "models", "mesh_scale", "workers", "max_fail_fraction"},
            "\"study\"");
        detail::maybe_get(s, "scenarios", rc.study_scenarios);
        if (auto m = s.find("models"); m != s.end()) {
            rc.study_models.clear();
            for (const auto& name : *m) {
                rc.study_models.push_back(model_kind_from(name.get<std::string>()));
            }
        }
        detail::maybe_get(s, "mesh_scale", rc.study_mesh_scale);
        detail::maybe_get(s, "workers", rc.workers);
        detail::maybe_get(s, "max_fail_fraction", rc.max_fail_fraction);
    }
    if (auto it = j.find("io"); it != j.end()) {
        detail::reject_unknown_keys(*it, {"out_dir"}, "\"io\"");
        detail::maybe_get(*it, "out_dir", rc.out_dir);
    }
    return rc;
}

inline RunConfig read_run_config(const std::string& path) {
    return run_config_from_json(detail::parse_json_file(path));
}

inline ordered_json run_config_to_json(const RunConfig& rc) {
    ordered_json j;
    j["seed"] = rc.seed;
    j["model"] = to_string(rc.model);
    j["mesh"] = {{"max_edge_inner", rc.scenario.max_edge_inner},
                 {"max_edge_outer", rc.scenario.max_edge_outer},
                 {"outer_pad", rc.scenario.outer_pad}};
    ordered_json s;
    s["n_insitu"] = rc.scenario.n_insitu;
    s["missing_pct"] = rc.scenario.missing_pct;
    s["T"] = rc.scenario.T;
    s["train_days"] = rc.scenario.train_days;
    s["n_sim"] = rc.scenario.n_sim;
    s["n_samp"] = rc.scenario.n_samp;
    s["n_pred"] = rc.scenario.n_pred;
    s["truth"] = {{"tau_omega", rc.scenario.truth.tau_omega},
                  {"kappa", rc.scenario.truth.kappa},
                  {"rho", rc.scenario.truth.rho},
                  {"tau1", rc.scenario.truth.tau1},
                  {"tau2", rc.scenario.truth.tau2}};
    s["beta"] = {rc.scenario.beta[0], rc.scenario.beta[1], rc.scenario.beta[2]};
    s["bias_a"] = rc.scenario.bias_a;
    s["noiseless"] = rc.scenario.noiseless;
    s["domain"] = rc.domain_rect;
    s["block_grid"] = {{"x0", rc.scenario.block_grid.x0}, {"y0", rc.scenario.block_grid.y0},
                       {"dx", rc.scenario.block_grid.dx}, {"dy", rc.scenario.block_grid.dy},
                       {"nx", rc.scenario.block_grid.nx}, {"ny", rc.scenario.block_grid.ny}};
    j["scenario"] = std::move(s);
    j["priors"] = {{"fixed_sd", rc.priors.fixed_sd},
                   {"field_scale_sd", rc.priors.field_scale_sd},
                   {"rho_var", rc.priors.rho_var},
                   {"loggamma_shape", rc.priors.loggamma_shape},
                   {"loggamma_rate", rc.priors.loggamma_rate}};
    j["optimizer"] = {{"max_iter", rc.optimizer.max_iter},
                      {"tol", rc.optimizer.tol},
                      {"max_restarts", rc.optimizer.max_restarts},
                      {"init_step", rc.optimizer.init_step},
                      {"hessian_step", rc.optimizer.hessian_step},
                      {"use_grid", rc.optimizer.use_grid},
                      {"theta_bound", rc.optimizer.theta_bound}};
    ordered_json models = ordered_json::array();
    for (ModelKind k : rc.study_models) models.push_back(to_string(k));
    j["study"] = {{"scenarios", rc.study_scenarios},
                  {"models", std::move(models)},
                  {"mesh_scale", rc.study_mesh_scale},
                  {"workers", rc.workers},
                  {"max_fail_fraction", rc.max_fail_fraction}};
    j["io"] = {{"out_dir", rc.out_dir}};
    return j;
}

inline std::string serialize_run_config(const RunConfig& rc) {
    return run_config_to_json(rc).dump(2) + "\n";
}

// Mesh dump for external plotting: vertex coordinates and triangle indices.
inline void write_mesh_csv(const std::string& vertices_path, const std::string& triangles_path,
                           const Mesh& mesh) {
    std::string v = "vertex_id,x,y\n";
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        v += strf("%zu,%.17g,%.17g\n", i + 1, mesh.vertices[i].x, mesh.vertices[i].y);
    }
    write_text_file(vertices_path, v);
    std::string tr = "v0,v1,v2\n";
    for (const auto& t : mesh.triangles) {
        tr += strf("%d,%d,%d\n", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    write_text_file(triangles_path, tr);
}

}  // namespace stfuse
