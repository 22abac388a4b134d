#pragma once

// Spatial domain handling: polygons, the structured triangular mesh, and the
// sparse projection matrices that map point / block observations onto mesh
// vertices (single time slice or stacked over a time horizon).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Sparse>

#include "core.hpp"

namespace stfuse {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

struct BBox {
    double xmin = 0.0, ymin = 0.0, xmax = 0.0, ymax = 0.0;

    double width() const { return xmax - xmin; }
    double height() const { return ymax - ymin; }

    bool contains(const Vec2& p) const {
        return p.x >= xmin && p.x <= xmax && p.y >= ymin && p.y <= ymax;
    }
};

// Simple polygon given as a ring of vertices (implicitly closed). Orientation
// does not matter; area() and centroid() use the shoelace formula.
class Polygon {
public:
    Polygon() = default;
    explicit Polygon(std::vector<Vec2> ring) : ring_(std::move(ring)) {}

    static Polygon rectangle(double x0, double y0, double dx, double dy) {
        return Polygon({{x0, y0}, {x0 + dx, y0}, {x0 + dx, y0 + dy}, {x0, y0 + dy}});
    }

    const std::vector<Vec2>& ring() const { return ring_; }
    std::size_t size() const { return ring_.size(); }

    double signed_area() const {
        double a = 0.0;
        const std::size_t n = ring_.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2& p = ring_[i];
            const Vec2& q = ring_[(i + 1) % n];
            a += p.x * q.y - q.x * p.y;
        }
        return 0.5 * a;
    }

    double area() const { return std::abs(signed_area()); }

    Vec2 centroid() const {
        const double a = signed_area();
        const std::size_t n = ring_.size();
        if (std::abs(a) < 1e-300) {
            // Degenerate ring: fall back to the vertex mean.
            Vec2 m;
            for (const Vec2& p : ring_) { m.x += p.x; m.y += p.y; }
            if (n > 0) { m.x /= static_cast<double>(n); m.y /= static_cast<double>(n); }
            return m;
        }
        double cx = 0.0, cy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2& p = ring_[i];
            const Vec2& q = ring_[(i + 1) % n];
            const double w = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        return {cx / (6.0 * a), cy / (6.0 * a)};
    }

    BBox bbox() const {
        if (ring_.empty()) return {};
        BBox b{ring_[0].x, ring_[0].y, ring_[0].x, ring_[0].y};
        for (const Vec2& p : ring_) {
            b.xmin = std::min(b.xmin, p.x);
            b.xmax = std::max(b.xmax, p.x);
            b.ymin = std::min(b.ymin, p.y);
            b.ymax = std::max(b.ymax, p.y);
        }
        return b;
    }

    // Point-in-polygon, boundary inclusive. Crossing test plus an explicit
    // on-segment check so points on the ring count as inside.
    bool contains(const Vec2& p, double tol = 1e-12) const {
        const std::size_t n = ring_.size();
        if (n < 3) return false;
        bool inside = false;
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
            const Vec2& a = ring_[j];
            const Vec2& b = ring_[i];
            if (on_segment(p, a, b, tol)) return true;
            const bool crosses = (b.y > p.y) != (a.y > p.y);
            if (crosses) {
                const double x_at = b.x + (p.y - b.y) / (a.y - b.y) * (a.x - b.x);
                if (p.x < x_at) inside = !inside;
            }
        }
        return inside;
    }

private:
    static bool on_segment(const Vec2& p, const Vec2& a, const Vec2& b, double tol) {
        const double ux = b.x - a.x, uy = b.y - a.y;
        const double vx = p.x - a.x, vy = p.y - a.y;
        const double len2 = ux * ux + uy * uy;
        if (len2 == 0.0) return std::abs(vx) <= tol && std::abs(vy) <= tol;
        const double cross = ux * vy - uy * vx;
        if (cross * cross > tol * tol * len2) return false;
        const double dot = vx * ux + vy * uy;
        return dot >= -tol * std::sqrt(len2) && dot <= len2 + tol * std::sqrt(len2);
    }

    std::vector<Vec2> ring_;
};

// One observation block. Axis-aligned rectangles (the common case, produced by
// the regular-grid factory) get exact closed-interval containment; general
// polygonal blocks use the polygon test.
struct Block {
    Polygon poly;
    bool is_rect = false;
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    static Block rect(double bx0, double by0, double dx, double dy) {
        Block b;
        b.poly = Polygon::rectangle(bx0, by0, dx, dy);
        b.is_rect = true;
        b.x0 = bx0;
        b.y0 = by0;
        b.x1 = bx0 + dx;
        b.y1 = by0 + dy;
        return b;
    }

    bool contains(const Vec2& p) const {
        if (is_rect) return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
        return poly.contains(p);
    }

    Vec2 centroid() const {
        if (is_rect) return {0.5 * (x0 + x1), 0.5 * (y0 + y1)};
        return poly.centroid();
    }

    double area() const { return poly.area(); }
};

// Blocks carry 1-based ids j = 1..J (id = position + 1).
class BlockSet {
public:
    BlockSet() = default;
    explicit BlockSet(std::vector<Block> blocks) : blocks_(std::move(blocks)) {
        for (const Block& b : blocks_) {
            if (!(b.area() > 0.0)) throw ConfigError("BlockSet: block with nonpositive area");
        }
    }

    struct GridSpec {
        double x0 = 0, y0 = 0, dx = 0, dy = 0;
        int nx = 0, ny = 0;
    };

    // Regular nx-by-ny grid of rectangles; block j = 1..nx*ny in row-major
    // order (x fastest). Edges computed as x0 + i*dx (no accumulation) so they
    // coincide bit-for-bit with mesh lattice ticks on aligned geometries.
    static BlockSet regular_grid(double x0, double y0, double dx, double dy, int nx, int ny) {
        if (!(dx > 0.0) || !(dy > 0.0)) throw ConfigError("BlockSet::regular_grid: dx and dy must be positive");
        if (nx < 1 || ny < 1) throw ConfigError("BlockSet::regular_grid: nx and ny must be >= 1");
        std::vector<Block> blocks;
        blocks.reserve(static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny));
        for (int iy = 0; iy < ny; ++iy) {
            for (int ix = 0; ix < nx; ++ix) {
                Block b = Block::rect(x0 + ix * dx, y0 + iy * dy, dx, dy);
                // Snap the far edges to the multiplication form as well.
                b.x1 = x0 + (ix + 1) * dx;
                b.y1 = y0 + (iy + 1) * dy;
                blocks.push_back(b);
            }
        }
        BlockSet bs(std::move(blocks));
        bs.grid_ = GridSpec{x0, y0, dx, dy, nx, ny};
        return bs;
    }

    const std::vector<Block>& blocks() const { return blocks_; }
    const Block& block(std::size_t i) const { return blocks_.at(i); }
    std::size_t size() const { return blocks_.size(); }
    const std::optional<GridSpec>& grid() const { return grid_; }

private:
    std::vector<Block> blocks_;
    std::optional<GridSpec> grid_;
};

enum class Zone : std::uint8_t { inner, outer };

// Structured triangulated lattice over the padded bounding box of the domain.
// Vertices sit on the tensor grid xs × ys (id = iy*nx_ticks + ix); each grid
// cell is split into two counter-clockwise triangles along the v00-v11
// diagonal, so triangle 2*c covers the lower-right half of cell c and 2*c+1
// the upper-left half. max_edge_inner / max_edge_outer bound the axis-aligned
// lattice pitch (cell diagonals are sqrt(2) times the pitch).
struct Mesh {
    std::vector<Vec2> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Zone> zone;
    double max_edge_inner = 0.0;
    double max_edge_outer = 0.0;
    double outer_pad = 0.0;

    // Lattice ticks; kept for O(log n) point location.
    std::vector<double> xs;
    std::vector<double> ys;

    int vertex_count() const { return static_cast<int>(vertices.size()); }
    int triangle_count() const { return static_cast<int>(triangles.size()); }
    int nx_ticks() const { return static_cast<int>(xs.size()); }
    int ny_ticks() const { return static_cast<int>(ys.size()); }

    double triangle_area(int k) const {
        const auto& t = triangles[static_cast<std::size_t>(k)];
        const Vec2& a = vertices[static_cast<std::size_t>(t[0])];
        const Vec2& b = vertices[static_cast<std::size_t>(t[1])];
        const Vec2& c = vertices[static_cast<std::size_t>(t[2])];
        return 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
    }

    struct Location {
        int triangle = -1;
        std::array<double, 3> weights{};  // barycentric, sum to 1
    };

    // Locates p in the lattice; ties on shared edges/vertices resolve to the
    // lowest-index containing triangle. Returns nullopt when p is outside.
    std::optional<Location> try_locate(const Vec2& p) const {
        const int nx = nx_ticks();
        const int ny = ny_ticks();
        if (nx < 2 || ny < 2) return std::nullopt;
        if (p.x < xs.front() || p.x > xs.back() || p.y < ys.front() || p.y > ys.back()) {
            return std::nullopt;
        }
        const int cx = cell_of(xs, p.x);
        const int cy = cell_of(ys, p.y);
        // A point on a cell edge is contained in neighbouring cells too, so
        // scan the up-to-4 candidate cells in triangle-index order.
        for (int iy = std::max(0, cy - 1); iy <= cy; ++iy) {
            for (int ix = std::max(0, cx - 1); ix <= cx; ++ix) {
                const int cell = iy * (nx - 1) + ix;
                for (int half = 0; half < 2; ++half) {
                    const int k = 2 * cell + half;
                    if (auto w = bary_if_inside(k, p)) return Location{k, *w};
                }
            }
        }
        return std::nullopt;
    }

    Location locate(const Vec2& p) const {
        auto loc = try_locate(p);
        if (!loc) {
            throw GeometryError(strf("point (%.17g, %.17g) lies outside the mesh", p.x, p.y));
        }
        return *loc;
    }

private:
    static int cell_of(const std::vector<double>& ticks, double v) {
        auto it = std::upper_bound(ticks.begin(), ticks.end(), v);
        int idx = static_cast<int>(it - ticks.begin()) - 1;
        return std::clamp(idx, 0, static_cast<int>(ticks.size()) - 2);
    }

    std::optional<std::array<double, 3>> bary_if_inside(int k, const Vec2& p) const {
        const auto& t = triangles[static_cast<std::size_t>(k)];
        const Vec2& a = vertices[static_cast<std::size_t>(t[0])];
        const Vec2& b = vertices[static_cast<std::size_t>(t[1])];
        const Vec2& c = vertices[static_cast<std::size_t>(t[2])];
        const double det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        double w1 = ((p.x - a.x) * (c.y - a.y) - (c.x - a.x) * (p.y - a.y)) / det;
        double w2 = ((b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y)) / det;
        double w0 = 1.0 - w1 - w2;
        const double tol = 1e-12;
        if (w0 < -tol || w1 < -tol || w2 < -tol) return std::nullopt;
        w0 = std::max(w0, 0.0);
        w1 = std::max(w1, 0.0);
        w2 = std::max(w2, 0.0);
        const double s = w0 + w1 + w2;
        return std::array<double, 3>{w0 / s, w1 / s, w2 / s};
    }
};

inline Mesh build_mesh(const Polygon& domain, double max_edge_inner, double outer_pad,
                       double max_edge_outer) {
    if (!(max_edge_inner > 0.0) || !(max_edge_outer > 0.0)) {
        throw ConfigError("build_mesh: edge-length parameters must be positive");
    }
    if (max_edge_inner > max_edge_outer) {
        throw ConfigError("build_mesh: max_edge_inner must not exceed max_edge_outer");
    }
    if (outer_pad < 0.0) throw ConfigError("build_mesh: outer_pad must be nonnegative");
    if (domain.size() < 3 || !(domain.area() > 1e-14)) {
        throw DomainError("build_mesh: degenerate domain polygon");
    }

    const BBox bb = domain.bbox();

    auto ticks = [&](double lo, double hi) {
        std::vector<double> t;
        // ceil with a small guard so exact multiples do not round up.
        const int n_in = std::max(1, static_cast<int>(std::ceil((hi - lo) / max_edge_inner - 1e-9)));
        const double pitch = (hi - lo) / n_in;
        int n_pad = 0;
        double pad_pitch = 0.0;
        if (outer_pad > 0.0) {
            n_pad = std::max(1, static_cast<int>(std::ceil(outer_pad / max_edge_outer - 1e-9)));
            pad_pitch = outer_pad / n_pad;
            for (int i = n_pad; i >= 1; --i) t.push_back(lo - i * pad_pitch);
        }
        for (int i = 0; i <= n_in; ++i) t.push_back(i == n_in ? hi : lo + i * pitch);
        for (int i = 1; i <= n_pad; ++i) t.push_back(hi + i * pad_pitch);
        return t;
    };

    Mesh mesh;
    mesh.max_edge_inner = max_edge_inner;
    mesh.max_edge_outer = max_edge_outer;
    mesh.outer_pad = outer_pad;
    mesh.xs = ticks(bb.xmin, bb.xmax);
    mesh.ys = ticks(bb.ymin, bb.ymax);

    const int nx = static_cast<int>(mesh.xs.size());
    const int ny = static_cast<int>(mesh.ys.size());
    mesh.vertices.reserve(static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny));
    mesh.zone.reserve(mesh.vertices.capacity());
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            const Vec2 v{mesh.xs[static_cast<std::size_t>(ix)], mesh.ys[static_cast<std::size_t>(iy)]};
            mesh.vertices.push_back(v);
            mesh.zone.push_back(domain.contains(v) ? Zone::inner : Zone::outer);
        }
    }

    mesh.triangles.reserve(2 * static_cast<std::size_t>(nx - 1) * static_cast<std::size_t>(ny - 1));
    for (int iy = 0; iy + 1 < ny; ++iy) {
        for (int ix = 0; ix + 1 < nx; ++ix) {
            const int v00 = iy * nx + ix;
            const int v10 = v00 + 1;
            const int v01 = v00 + nx;
            const int v11 = v01 + 1;
            mesh.triangles.push_back({v00, v10, v11});
            mesh.triangles.push_back({v00, v11, v01});
        }
    }
    return mesh;
}

enum class SourceKind : std::uint8_t { point, block };

struct ProjRow {
    int t = 1;  // 1-based time index
    SourceKind kind = SourceKind::point;
    int id = 0;  // 1-based source id (site or block)
};

// Sparse row-normalized projection matrix. Columns index mesh vertices; for a
// stacked space-time matrix the column of vertex g at time t is (t-1)*G + g.
struct ProjMatrix {
    Eigen::SparseMatrix<double, Eigen::RowMajor> mat;
    std::vector<ProjRow> rows;
    int vertex_count = 0;  // G
    int horizon = 1;       // T

    Eigen::Index n_rows() const { return mat.rows(); }
};

// Barycentric interpolation rows for point observations; ids are 1..n in
// input order.
inline ProjMatrix point_projection(const Mesh& mesh, const std::vector<Vec2>& points) {
    const int g = mesh.vertex_count();
    ProjMatrix out;
    out.vertex_count = g;
    out.horizon = 1;
    out.mat.resize(static_cast<Eigen::Index>(points.size()), g);
    out.rows.reserve(points.size());

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(points.size() * 3);
    for (std::size_t i = 0; i < points.size(); ++i) {
        auto loc = mesh.try_locate(points[i]);
        if (!loc) {
            throw GeometryError(strf("point %zu at (%.17g, %.17g) lies outside the mesh", i + 1,
                                     points[i].x, points[i].y));
        }
        const auto& tri = mesh.triangles[static_cast<std::size_t>(loc->triangle)];
        for (int k = 0; k < 3; ++k) {
            if (loc->weights[static_cast<std::size_t>(k)] != 0.0) {
                trips.emplace_back(static_cast<int>(i), tri[static_cast<std::size_t>(k)],
                                   loc->weights[static_cast<std::size_t>(k)]);
            }
        }
        out.rows.push_back(ProjRow{1, SourceKind::point, static_cast<int>(i) + 1});
    }
    out.mat.setFromTriplets(trips.begin(), trips.end());
    return out;
}

// Equal-weight (1/m) rows over the mesh vertices contained in each block.
// A block that covers no vertex degrades to barycentric weights at its
// centroid; a block whose centroid is outside the mesh is an error.
inline ProjMatrix block_projection(const Mesh& mesh, const BlockSet& blocks) {
    const int g = mesh.vertex_count();
    ProjMatrix out;
    out.vertex_count = g;
    out.horizon = 1;
    out.mat.resize(static_cast<Eigen::Index>(blocks.size()), g);
    out.rows.reserve(blocks.size());

    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t j = 0; j < blocks.size(); ++j) {
        const Block& b = blocks.block(j);
        std::vector<int> inside;
        for (int v = 0; v < g; ++v) {
            if (b.contains(mesh.vertices[static_cast<std::size_t>(v)])) inside.push_back(v);
        }
        if (!inside.empty()) {
            const double w = 1.0 / static_cast<double>(inside.size());
            for (int v : inside) trips.emplace_back(static_cast<int>(j), v, w);
        } else {
            const Vec2 c = b.centroid();
            auto loc = mesh.try_locate(c);
            if (!loc) {
                throw GeometryError(strf("block %zu lies outside the mesh (no vertex inside and "
                                         "centroid (%.17g, %.17g) not covered)",
                                         j + 1, c.x, c.y));
            }
            const auto& tri = mesh.triangles[static_cast<std::size_t>(loc->triangle)];
            for (int k = 0; k < 3; ++k) {
                if (loc->weights[static_cast<std::size_t>(k)] != 0.0) {
                    trips.emplace_back(static_cast<int>(j), tri[static_cast<std::size_t>(k)],
                                       loc->weights[static_cast<std::size_t>(k)]);
                }
            }
        }
        out.rows.push_back(ProjRow{1, SourceKind::block, static_cast<int>(j) + 1});
    }
    out.mat.setFromTriplets(trips.begin(), trips.end());
    return out;
}

// Stacks a single-time projection matrix block-diagonally over T time slices,
// keeping only the observed (t, row) pairs. Pairs use 1-based t and 0-based
// row index into A; output rows are sorted by (t, row) for a canonical order.
inline ProjMatrix spacetime_blockdiag(const ProjMatrix& A, int T,
                                      std::vector<std::pair<int, int>> observed) {
    if (T < 1) throw ConfigError("spacetime_blockdiag: T must be >= 1");
    if (A.horizon != 1) throw ConfigError("spacetime_blockdiag: input must be a single-time matrix");
    const int g = A.vertex_count;
    const int n_in = static_cast<int>(A.n_rows());

    std::sort(observed.begin(), observed.end());
    for (std::size_t i = 0; i < observed.size(); ++i) {
        const auto [t, row] = observed[i];
        if (t < 1 || t > T) throw ConfigError(strf("spacetime_blockdiag: time index %d out of range 1..%d", t, T));
        if (row < 0 || row >= n_in) throw ConfigError(strf("spacetime_blockdiag: row index %d out of range 0..%d", row, n_in - 1));
        if (i > 0 && observed[i] == observed[i - 1]) {
            throw ConfigError(strf("spacetime_blockdiag: duplicate observed pair (t=%d, row=%d)", t, row));
        }
    }

    ProjMatrix out;
    out.vertex_count = g;
    out.horizon = T;
    out.mat.resize(static_cast<Eigen::Index>(observed.size()),
                   static_cast<Eigen::Index>(g) * static_cast<Eigen::Index>(T));
    out.rows.reserve(observed.size());

    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        const auto [t, row] = observed[i];
        const Eigen::Index shift = static_cast<Eigen::Index>(t - 1) * g;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(A.mat, row); it; ++it) {
            trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col() + shift), it.value());
        }
        ProjRow meta = A.rows[static_cast<std::size_t>(row)];
        meta.t = t;
        out.rows.push_back(meta);
    }
    out.mat.setFromTriplets(trips.begin(), trips.end());
    return out;
}

}  // namespace stfuse
