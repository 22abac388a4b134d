#pragma once

// Static report rendering: per-day posterior mean and sd of the latent
// surface as SVG heatmaps (one filled triangle per mesh element, shared
// linear color scale across days), plus per-day prediction RMSE data for a
// line chart.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stfuse/inference.hpp"
#include "stfuse/model.hpp"

namespace stfuse {

// Posterior mean and sd of y(v, t) = x(v)'beta + xi_t(v) at every mesh
// vertex and day, mixed over the hyperparameter grid. Variances come from
// the retained factorizations (diagonal-of-inverse recursion); fits without
// factors fall back to the sparse path.
struct FieldMoments {
    Eigen::MatrixXd mean;  // G x T
    Eigen::MatrixXd sd;    // G x T
};

inline FieldMoments field_moments(const FitResult& fit, const Mesh& mesh) {
    if (fit.grid.empty()) throw ConfigError("field_moments: empty fit grid");
    const int G = fit.G, T = fit.T, p1 = fit.p1;
    if (mesh.vertex_count() != G) {
        throw ConfigError("field_moments: mesh does not match the fitted vertex count");
    }
    const Eigen::Index n_xi = static_cast<Eigen::Index>(G) * T;
    const int nf = p1 + (fit.has_bias ? 1 : 0);
    const Eigen::MatrixXd xv = vertex_covariates(mesh, fit.center);  // G x p1
    if (xv.cols() != p1) throw ConfigError("field_moments: covariate width mismatch");

    Eigen::MatrixXd mix_mean = Eigen::MatrixXd::Zero(G, T);
    Eigen::MatrixXd mix_m2 = Eigen::MatrixXd::Zero(G, T);  // E[mean^2 + var]
    for (const auto& gp : fit.grid) {
        Eigen::VectorXd field_var;
        Eigen::MatrixXd cross, border;
        if (gp.factor) {
            auto marg = gp.factor->inverse_marginals();
            field_var = std::move(marg.field_var);
            cross = std::move(marg.cross_cov);
            border = std::move(marg.border_cov);
        } else {
            field_var = inverse_diagonal(gp.latent.precision).head(n_xi);
            Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n_xi + nf, nf);
            for (int jj = 0; jj < nf; ++jj) rhs(n_xi + jj, jj) = 1.0;
            Eigen::MatrixXd cols = gp.latent.precision.solve(rhs);
            cross = cols.topRows(n_xi);
            border = cols.bottomRows(nf);
        }
        const Eigen::VectorXd beta_mean = gp.latent.mean.segment(n_xi, p1);
        for (int t = 0; t < T; ++t) {
            for (int v = 0; v < G; ++v) {
                const Eigen::Index i = static_cast<Eigen::Index>(t) * G + v;
                const double m = gp.latent.mean[i] + xv.row(v).dot(beta_mean);
                // Only the beta part of the border enters y; the bias column
                // (last, fusion only) gets weight zero.
                double var = field_var[i];
                var += 2.0 * xv.row(v).dot(cross.row(i).head(p1));
                var += xv.row(v) * border.topLeftCorner(p1, p1) * xv.row(v).transpose();
                mix_mean(v, t) += gp.weight * m;
                mix_m2(v, t) += gp.weight * (m * m + std::max(var, 0.0));
            }
        }
    }
    FieldMoments out;
    out.mean = mix_mean;
    out.sd = (mix_m2 - mix_mean.cwiseProduct(mix_mean)).cwiseMax(0.0).cwiseSqrt();
    return out;
}

namespace svg {

// Piecewise-linear perceptual color ramp (dark blue to yellow).
inline std::string ramp_color(double u) {
    static const double stops[9][3] = {
        {68, 1, 84},    {72, 40, 120},  {62, 74, 137},  {49, 104, 142}, {38, 130, 142},
        {31, 158, 137}, {53, 183, 121}, {109, 205, 89}, {253, 231, 37},
    };
    u = std::clamp(u, 0.0, 1.0);
    const double x = u * 8.0;
    const int k = std::min(7, static_cast<int>(x));
    const double f = x - k;
    const auto mix = [&](int c) {
        return static_cast<int>(std::lround(stops[k][c] + f * (stops[k + 1][c] - stops[k][c])));
    };
    return strf("#%02x%02x%02x", mix(0), mix(1), mix(2));
}

}  // namespace svg

struct HeatmapLayout {
    int panel_px = 180;   // square drawing area per day
    int columns = 7;      // panels per row
    int margin_px = 6;
    int label_px = 14;
};

// One panel per day, triangles filled by the mean of their vertex values on
// a linear scale pooled across all days (shared scale for comparability).
inline std::string heatmap_svg(const Mesh& mesh, const Eigen::MatrixXd& values,
                               const std::string& title, HeatmapLayout layout = {}) {
    if (values.rows() != mesh.vertex_count()) {
        throw ConfigError("heatmap_svg: value rows do not match mesh vertices");
    }
    const int T = static_cast<int>(values.cols());
    if (T < 1) throw ConfigError("heatmap_svg: no days to draw");
    const double lo = values.minCoeff();
    const double hi = values.maxCoeff();
    const double span = (hi > lo) ? hi - lo : 1.0;

    const double xmin = mesh.xs.front(), xmax = mesh.xs.back();
    const double ymin = mesh.ys.front(), ymax = mesh.ys.back();
    const double wx = xmax - xmin, wy = ymax - ymin;
    const double scale = layout.panel_px / std::max(wx, wy);

    const int cols = std::min(layout.columns, T);
    const int rows = (T + cols - 1) / cols;
    const int cell_w = layout.panel_px + layout.margin_px;
    const int cell_h = layout.panel_px + layout.label_px + layout.margin_px;
    const int width = cols * cell_w + layout.margin_px;
    const int height = rows * cell_h + layout.margin_px + layout.label_px;

    std::string out = strf(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
        "viewBox=\"0 0 %d %d\">\n",
        width, height, width, height);
    out += strf(
        "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\">%s "
        "(scale %.4g to %.4g)</text>\n",
        layout.margin_px, layout.label_px - 2, title.c_str(), lo, hi);

    for (int t = 0; t < T; ++t) {
        const int cx = (t % cols) * cell_w + layout.margin_px;
        const int cy = (t / cols) * cell_h + layout.margin_px + layout.label_px;
        out += strf("<g class=\"panel\" transform=\"translate(%d,%d)\">\n", cx, cy);
        out += strf(
            "<text x=\"0\" y=\"%d\" font-family=\"sans-serif\" font-size=\"10\">day %d</text>\n",
            layout.label_px - 4, t + 1);
        for (const auto& tri : mesh.triangles) {
            double acc = 0.0;
            std::array<double, 6> pts{};
            for (int c = 0; c < 3; ++c) {
                const Vec2& p = mesh.vertices[static_cast<std::size_t>(tri[static_cast<std::size_t>(c)])];
                pts[static_cast<std::size_t>(2 * c)] = (p.x - xmin) * scale;
                // SVG y grows downward.
                pts[static_cast<std::size_t>(2 * c + 1)] = layout.label_px + (ymax - p.y) * scale;
                acc += values(tri[static_cast<std::size_t>(c)], t);
            }
            const std::string color = svg::ramp_color((acc / 3.0 - lo) / span);
            out += strf(
                "<polygon points=\"%.2f,%.2f %.2f,%.2f %.2f,%.2f\" fill=\"%s\" stroke=\"none\"/>\n",
                pts[0], pts[1], pts[2], pts[3], pts[4], pts[5], color.c_str());
        }
        out += "</g>\n";
    }
    out += "</svg>\n";
    return out;
}

// Per-day prediction RMSE from written predictions against the held-out
// truth, matched by exact location coordinates. Line-chart data.
inline std::vector<double> rmse_by_day(const std::vector<PredictRow>& rows,
                                       const std::vector<Vec2>& locations,
                                       const Eigen::MatrixXd& truth) {
    const Eigen::Index n_loc = truth.rows();
    const Eigen::Index T = truth.cols();
    if (static_cast<Eigen::Index>(locations.size()) != n_loc) {
        throw ConfigError("rmse_by_day: location count does not match truth rows");
    }
    std::map<std::pair<std::uint64_t, std::uint64_t>, Eigen::Index> index;
    const auto key = [](const Vec2& p) {
        std::uint64_t bx, by;
        std::memcpy(&bx, &p.x, sizeof bx);
        std::memcpy(&by, &p.y, sizeof by);
        return std::make_pair(bx, by);
    };
    for (Eigen::Index l = 0; l < n_loc; ++l) index[key(locations[static_cast<std::size_t>(l)])] = l;

    Eigen::MatrixXd pred(n_loc, T);
    Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n_loc, T);
    for (const auto& r : rows) {
        if (r.target.kind != SourceKind::point) continue;
        const auto it = index.find(key(r.target.s));
        if (it == index.end()) continue;
        if (r.target.t < 1 || r.target.t > T) continue;
        pred(it->second, r.target.t - 1) = r.mean;
        seen(it->second, r.target.t - 1) = 1;
    }
    if (seen.sum() != n_loc * T) {
        throw ConfigError("rmse_by_day: predictions do not cover every location and day");
    }
    std::vector<double> out(static_cast<std::size_t>(T));
    for (Eigen::Index t = 0; t < T; ++t) {
        out[static_cast<std::size_t>(t)] =
            std::sqrt((pred.col(t) - truth.col(t)).squaredNorm() / static_cast<double>(n_loc));
    }
    return out;
}

inline std::string rmse_by_day_csv(const std::vector<double>& rmse) {
    std::string out = "day,rmse\n";
    for (std::size_t t = 0; t < rmse.size(); ++t) {
        out += strf("%zu,%.17g\n", t + 1, rmse[t]);
    }
    return out;
}

}  // namespace stfuse
