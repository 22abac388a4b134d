#pragma once

// Finite-element matrices on the triangulated mesh and the resulting sparse
// Matern-field precision, plus the closed-form Matern covariance and the
// kappa/tau/sigma^2 parameter conversions (smoothness fixed at nu = 1, i.e.
// operator order alpha = 2 in two dimensions).

#include <cmath>
#include <numbers>

#include <Eigen/Sparse>

#include "bessel.hpp"
#include "core.hpp"
#include "geometry.hpp"
#include "gmrf.hpp"

namespace stfuse {

// P1 hat-function assembly with a lumped (diagonal) mass matrix, so that
// C^{-1} stays diagonal and the precision below stays sparse.
struct FemMatrices {
    Eigen::VectorXd c_lumped;  // per-vertex lumped area
    SpMat g_stiff;             // stiffness (full symmetric storage)

    Eigen::Index dim() const { return c_lumped.size(); }
};

inline FemMatrices fem_matrices(const Mesh& mesh) {
    const int g = mesh.vertex_count();
    FemMatrices fem;
    fem.c_lumped = Eigen::VectorXd::Zero(g);

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(mesh.triangle_count()) * 9);
    for (int k = 0; k < mesh.triangle_count(); ++k) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(k)];
        const double area = mesh.triangle_area(k);
        if (area < 1e-14) {
            throw GeometryError(strf("fem_matrices: degenerate triangle %d (area %.3e)", k, area));
        }
        const Vec2& a = mesh.vertices[static_cast<std::size_t>(tri[0])];
        const Vec2& b = mesh.vertices[static_cast<std::size_t>(tri[1])];
        const Vec2& c = mesh.vertices[static_cast<std::size_t>(tri[2])];
        // Gradient of hat i is (b_i, c_i) / (2 area) with the cyclic edge
        // differences below; stiffness entries are grad_i . grad_j * area.
        const double bb[3] = {b.y - c.y, c.y - a.y, a.y - b.y};
        const double cc[3] = {c.x - b.x, a.x - c.x, b.x - a.x};
        for (int i = 0; i < 3; ++i) {
            fem.c_lumped[tri[static_cast<std::size_t>(i)]] += area / 3.0;
            for (int j = 0; j < 3; ++j) {
                const double kij = (bb[i] * bb[j] + cc[i] * cc[j]) / (4.0 * area);
                trips.emplace_back(tri[static_cast<std::size_t>(i)], tri[static_cast<std::size_t>(j)], kij);
            }
        }
    }
    fem.g_stiff.resize(g, g);
    fem.g_stiff.setFromTriplets(trips.begin(), trips.end());
    fem.g_stiff.makeCompressed();
    return fem;
}

// Matern parameter bundle for nu = 1, alpha = 2, d = 2. The two normative
// identities are sigma2 = 1/(4 pi kappa^2 tau^2) and range = sqrt(8 nu)/kappa.
struct SpdeParams {
    double kappa = 0.0;
    double tau_omega = 0.0;
    double sigma2_omega = 0.0;
    double nu = 1.0;
    double alpha = 2.0;
    double range = 0.0;
};

inline SpdeParams convert_params(double kappa, double sigma2, double nu = 1.0) {
    if (!(kappa > 0.0) || !(sigma2 > 0.0)) {
        throw ConfigError(strf("convert_params: kappa and sigma2 must be positive (kappa=%g, sigma2=%g)",
                               kappa, sigma2));
    }
    if (nu != 1.0) throw ConfigError("convert_params: only nu = 1 is supported");
    SpdeParams p;
    p.kappa = kappa;
    p.sigma2_omega = sigma2;
    p.tau_omega = 1.0 / (kappa * std::sqrt(4.0 * std::numbers::pi * sigma2));
    p.nu = nu;
    p.alpha = 2.0;
    p.range = std::sqrt(8.0 * nu) / kappa;
    return p;
}

inline double sigma2_from(double kappa, double tau_omega) {
    if (!(kappa > 0.0) || !(tau_omega > 0.0)) {
        throw ConfigError("sigma2_from: kappa and tau_omega must be positive");
    }
    return 1.0 / (4.0 * std::numbers::pi * kappa * kappa * tau_omega * tau_omega);
}

// Stationary Matern covariance, nu = 1:
//   sigma^2 * (kappa d) * K_1(kappa d), continuous at d = 0 with value sigma^2.
inline double matern_cov(double d, double kappa, double sigma2, double nu = 1.0) {
    if (d < 0.0) throw ConfigError("matern_cov: distance must be nonnegative");
    if (!(kappa > 0.0) || !(sigma2 > 0.0)) {
        throw ConfigError("matern_cov: kappa and sigma2 must be positive");
    }
    if (nu != 1.0) throw ConfigError("matern_cov: only nu = 1 is supported");
    const double z = kappa * d;
    // (kappa d) K_1(kappa d) -> 1 as d -> 0; below ~1e-8 the limit value is
    // already accurate to machine precision.
    if (z < 1e-8) return sigma2;
    return sigma2 * z * bessel_k1(z);
}

// Precision of the tau-scaled field for alpha = 2:
//   Q_S = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)
// Precomputing G C^{-1} G makes repeated evaluation at new (kappa, tau)
// cheap, which the hyperparameter search relies on.
class SpatialPrecision {
public:
    explicit SpatialPrecision(const FemMatrices& fem)
        : c_(fem.c_lumped), g_(fem.g_stiff) {
        if ((c_.array() <= 0.0).any()) {
            throw ConfigError("SpatialPrecision: lumped mass entries must be positive");
        }
        const SpMat cinv_g = c_.cwiseInverse().asDiagonal() * g_;
        gcg_ = g_ * cinv_g;
        gcg_.makeCompressed();
    }

    SparseSym operator()(double kappa, double tau_omega) const {
        if (!(kappa > 0.0) || !(tau_omega > 0.0)) {
            throw ConfigError(strf("SpatialPrecision: kappa and tau_omega must be positive "
                                   "(kappa=%g, tau_omega=%g)", kappa, tau_omega));
        }
        const double k2 = kappa * kappa;
        const double t2 = tau_omega * tau_omega;
        SpMat q = t2 * (2.0 * k2 * g_ + gcg_);
        q += SpMat((t2 * k2 * k2) * c_.asDiagonal());
        return SparseSym(q);
    }

    Eigen::Index dim() const { return c_.size(); }

private:
    Eigen::VectorXd c_;
    SpMat g_;
    SpMat gcg_;
};

inline SparseSym precision_spatial(const FemMatrices& fem, double kappa, double tau_omega) {
    return SpatialPrecision(fem)(kappa, tau_omega);
}

}  // namespace stfuse
