#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <stfuse/core.hpp>
#include <stfuse/gmrf.hpp>

using namespace stfuse;

namespace {

// Random sparse SPD matrix: banded A*A^T + shift*I, deterministic in seed.
SparseSym random_spd(int n, std::uint64_t seed, int band = 3, double shift = 0.5) {
    Rng rng(seed);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = std::max(0, i - band); j <= std::min(n - 1, i + band); ++j) {
            a(i, j) = rng.normal();
        }
    }
    Eigen::MatrixXd m = a * a.transpose() + shift * Eigen::MatrixXd::Identity(n, n);
    return SparseSym(m.sparseView());
}

}  // namespace

TEST_CASE("precision_ar1 matches the stated tridiagonal form") {
    SECTION("rho = 0 gives the identity") {
        Eigen::MatrixXd q = precision_ar1(0.0, 4).dense();
        REQUIRE((q - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("T=3, rho=0.7") {
        Eigen::MatrixXd q = precision_ar1(0.7, 3).dense();
        REQUIRE(q(0, 0) == 1.0);
        REQUIRE(q(1, 1) == Catch::Approx(1.49).margin(1e-15));
        REQUIRE(q(2, 2) == 1.0);
        REQUIRE(q(1, 0) == -0.7);
        REQUIRE(q(2, 1) == -0.7);
        REQUIRE(q(2, 0) == 0.0);
    }

    SECTION("T=2 inverse is the stationary AR(1) covariance") {
        const double rho = -0.35;
        Eigen::MatrixXd q = precision_ar1(rho, 2).dense();
        Eigen::MatrixXd cov = q.inverse();
        const double c = 1.0 / (1.0 - rho * rho);
        REQUIRE(cov(0, 0) == Catch::Approx(c).epsilon(1e-12));
        REQUIRE(cov(1, 1) == Catch::Approx(c).epsilon(1e-12));
        REQUIRE(cov(0, 1) == Catch::Approx(c * rho).epsilon(1e-12));
    }

    SECTION("T=1 degenerates to the stationary marginal precision") {
        Eigen::MatrixXd q = precision_ar1(0.7, 1).dense();
        REQUIRE(q(0, 0) == Catch::Approx(1.0 - 0.49).margin(1e-15));
    }

    SECTION("invalid arguments") {
        REQUIRE_THROWS_AS(precision_ar1(1.0, 3), ConfigError);
        REQUIRE_THROWS_AS(precision_ar1(-1.2, 3), ConfigError);
        REQUIRE_THROWS_AS(precision_ar1(0.5, 0), ConfigError);
    }
}

TEST_CASE("kron_precision assembles the space-time precision") {
    SparseSym qs = random_spd(5, 11);
    const double rho = 0.7;

    SECTION("T=1 reproduces the (rescaled) spatial matrix") {
        SparseSym qt = precision_ar1(rho, 1);
        SparseSym q = kron_precision(qt, qs);
        Eigen::MatrixXd want = (1.0 - rho * rho) * qs.dense();
        REQUIRE((q.dense() - want).cwiseAbs().maxCoeff() < 1e-14);
    }

    SECTION("dense inverse has AR(1)-in-time, Sigma_S-in-space blocks") {
        const int T = 3, g = 5;
        SparseSym qt = precision_ar1(rho, T);
        SparseSym q = kron_precision(qt, qs);
        REQUIRE(q.dim() == T * g);

        Eigen::MatrixXd cov = q.dense().inverse();
        Eigen::MatrixXd sigma_s = qs.dense().inverse();
        const double c = 1.0 / (1.0 - rho * rho);
        for (int t1 = 0; t1 < T; ++t1) {
            for (int t2 = 0; t2 < T; ++t2) {
                Eigen::MatrixXd want = c * std::pow(rho, std::abs(t1 - t2)) * sigma_s;
                Eigen::MatrixXd got = cov.block(t1 * g, t2 * g, g, g);
                REQUIRE((got - want).cwiseAbs().maxCoeff() < 1e-8 * want.cwiseAbs().maxCoeff());
            }
        }
    }

    SECTION("time-marginal inflation factor at rho=0.7 is 1/0.51") {
        const int T = 5, g = 4;
        SparseSym qsmall = random_spd(g, 3);
        SparseSym q = kron_precision(precision_ar1(0.7, T), qsmall);
        Eigen::MatrixXd cov = q.dense().inverse();
        Eigen::MatrixXd sigma_s = qsmall.dense().inverse();
        for (int t = 0; t < T; ++t) {
            Eigen::MatrixXd block = cov.block(t * g, t * g, g, g);
            const double factor = block(0, 0) / sigma_s(0, 0);
            REQUIRE(factor == Catch::Approx(1.0 / 0.51).epsilon(1e-10));
        }
    }

    SECTION("nonzero count multiplies") {
        SparseSym qt = precision_ar1(0.4, 4);
        SparseSym q = kron_precision(qt, qs);
        REQUIRE(q.full().nonZeros() == qt.full().nonZeros() * qs.full().nonZeros());
    }
}

TEST_CASE("factorize, solve, and logdet") {
    SECTION("diagonal example") {
        SpMat d(3, 3);
        d.insert(0, 0) = 2.0;
        d.insert(1, 1) = 2.0;
        d.insert(2, 2) = 2.0;
        SparseSym q(d);
        REQUIRE(q.logdet() == Catch::Approx(3.0 * std::log(2.0)).epsilon(1e-14));
    }

    SECTION("random SPD matches dense oracle") {
        for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
            SparseSym q = random_spd(8, seed);
            Eigen::MatrixXd dq = q.dense();
            Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(8, -1.0, 1.0);

            Eigen::LLT<Eigen::MatrixXd> dense_llt(dq);
            Eigen::VectorXd x_dense = dense_llt.solve(b);
            double ld_dense = 0.0;
            for (int i = 0; i < 8; ++i) ld_dense += 2.0 * std::log(dense_llt.matrixL()(i, i));

            REQUIRE((q.solve(b) - x_dense).norm() < 1e-10 * x_dense.norm());
            REQUIRE(q.logdet() == Catch::Approx(ld_dense).epsilon(1e-10));
            REQUIRE((dq * q.solve(b) - b).norm() < 1e-8 * b.norm());
        }
    }

    SECTION("factorization reconstructs the matrix") {
        SparseSym q = random_spd(12, 7);
        const auto& f = q.factorize();
        SpMat l = f.llt.matrixL();
        Eigen::MatrixXd ll = Eigen::MatrixXd(l) * Eigen::MatrixXd(l).transpose();
        Eigen::MatrixXd p = f.llt.permutationP() * Eigen::MatrixXd::Identity(12, 12);
        Eigen::MatrixXd recon = p.transpose() * ll * p;
        REQUIRE((recon - q.dense()).cwiseAbs().maxCoeff() <
                1e-8 * q.dense().cwiseAbs().maxCoeff());
    }

    SECTION("jitter rescues a semidefinite matrix") {
        Eigen::MatrixXd m(2, 2);
        m << 1.0, 1.0, 1.0, 1.0;
        SparseSym q(m.sparseView());
        const auto& f = q.factorize();  // rank one: needs jitter
        REQUIRE(f.jitter > 0.0);
        REQUIRE(std::isfinite(f.logdet));
    }

    SECTION("indefinite matrix fails with NumericalError") {
        Eigen::MatrixXd m(2, 2);
        m << 1.0, 0.0, 0.0, -5.0;
        SparseSym q(m.sparseView());
        REQUIRE_THROWS_AS(q.logdet(), NumericalError);
    }
}

TEST_CASE("repeat solver reuses the symbolic analysis") {
    SparseSym q1 = random_spd(20, 5);
    // Same pattern, different values.
    SpMat scaled = SpMat(1.7 * q1.lower());
    SparseSym q2(scaled);

    RepeatSolver rs;
    REQUIRE_THROWS_AS(rs.factorize(q1), ConfigError);  // analyze first
    rs.analyze(q1);
    REQUIRE(rs.factorize(q1));
    Eigen::VectorXd b = Eigen::VectorXd::Ones(20);
    REQUIRE((q1.dense() * rs.solve(b) - b).norm() < 1e-8);
    REQUIRE(rs.logdet() == Catch::Approx(q1.logdet()).epsilon(1e-12));

    REQUIRE(rs.factorize(q2));
    REQUIRE((q2.dense() * rs.solve(b) - b).norm() < 1e-8);
    REQUIRE(rs.logdet() == Catch::Approx(q2.logdet()).epsilon(1e-12));
}

TEST_CASE("sample_gmrf draws from the right distribution") {
    SECTION("identity precision: sample covariance near I") {
        const int d = 4, n = 10000;
        SpMat eye(d, d);
        eye.setIdentity();
        GaussianConditional cond{Eigen::VectorXd::Zero(d), SparseSym(eye)};
        Eigen::MatrixXd x = sample_gmrf(cond, n, 99);
        REQUIRE(x.rows() == d);
        REQUIRE(x.cols() == n);
        Eigen::MatrixXd centered = x.colwise() - x.rowwise().mean();
        Eigen::MatrixXd cov = centered * centered.transpose() / double(n - 1);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) {
                REQUIRE(std::abs(cov(i, j) - (i == j ? 1.0 : 0.0)) < 0.05);
            }
        }
    }

    SECTION("same seed gives identical draws, different seeds differ") {
        SparseSym q = random_spd(6, 8);
        GaussianConditional cond{Eigen::VectorXd::Zero(6), q};
        Eigen::MatrixXd a = sample_gmrf(cond, 5, 123);
        Eigen::MatrixXd b = sample_gmrf(cond, 5, 123);
        REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
        Eigen::MatrixXd c = sample_gmrf(cond, 5, 124);
        REQUIRE((a - c).cwiseAbs().maxCoeff() > 0.0);
    }

    SECTION("nonzero mean and general precision: moments match") {
        const int d = 5, n = 20000;
        SparseSym q = random_spd(d, 21, 2, 1.0);
        Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(d, -2.0, 2.0);
        GaussianConditional cond{mu, q};
        Eigen::MatrixXd x = sample_gmrf(cond, n, 7);

        Eigen::MatrixXd cov_want = q.dense().inverse();
        Eigen::VectorXd mean = x.rowwise().mean();
        for (int i = 0; i < d; ++i) {
            const double se = std::sqrt(cov_want(i, i) / n);
            REQUIRE(std::abs(mean[i] - mu[i]) < 3.5 * se);
        }
        Eigen::MatrixXd centered = x.colwise() - mean;
        Eigen::MatrixXd cov = centered * centered.transpose() / double(n - 1);
        REQUIRE((cov - cov_want).cwiseAbs().maxCoeff() < 0.08 * cov_want.cwiseAbs().maxCoeff());
    }
}

TEST_CASE("inverse_diagonal matches the dense inverse") {
    for (std::uint64_t seed : {4ULL, 14ULL}) {
        SparseSym q = random_spd(40, seed, 4, 1.0);
        Eigen::VectorXd d = inverse_diagonal(q);
        Eigen::VectorXd want = q.dense().inverse().diagonal();
        REQUIRE((d - want).cwiseAbs().maxCoeff() < 1e-9 * want.cwiseAbs().maxCoeff());
    }
    // Space-time shaped instance too.
    SparseSym q = kron_precision(precision_ar1(0.6, 4), random_spd(12, 30, 2, 1.0));
    Eigen::VectorXd d = inverse_diagonal(q);
    Eigen::VectorXd want = q.dense().inverse().diagonal();
    REQUIRE((d - want).cwiseAbs().maxCoeff() < 1e-9 * want.cwiseAbs().maxCoeff());
}

TEST_CASE("block tridiagonal Cholesky agrees with the dense factorization") {
    // Posterior-shaped SPD matrix: AR(1)-in-time Kronecker block plus a
    // dense fixed-effect border. Cholesky without pivoting is unique, so
    // every output can be checked against Eigen's dense LLT.
    const int G = 4, T = 3, nf = 2;
    const Eigen::Index n = G * T + nf;
    SparseSym q_kron = kron_precision(precision_ar1(0.55, T), random_spd(G, 9, 2, 1.5));

    Eigen::MatrixXd full = Eigen::MatrixXd::Zero(n, n);
    full.topLeftCorner(G * T, G * T) = q_kron.dense();
    Rng rng(17);
    for (int i = 0; i < nf; ++i) {
        for (int j = 0; j < G * T; ++j) full(G * T + i, j) = full(j, G * T + i) = 0.3 * rng.normal();
    }
    full.bottomRightCorner(nf, nf) << 8.0, 0.5, 0.5, 6.0;

    Eigen::LLT<Eigen::MatrixXd> dense(full);
    REQUIRE(dense.info() == Eigen::Success);
    Eigen::MatrixXd ld = dense.matrixL();

    SpMat sp = full.sparseView();
    BlockTriCholesky bt;
    REQUIRE(bt.factorize(sp, G, T, nf));

    const double logdet_want = 2.0 * ld.diagonal().array().log().sum();
    CHECK(bt.logdet() == Catch::Approx(logdet_want).epsilon(1e-12));

    Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(n, -1.0, 2.0);
    Eigen::VectorXd x_want = dense.solve(b);
    CHECK((bt.solve(b) - x_want).cwiseAbs().maxCoeff() < 1e-10 * x_want.cwiseAbs().maxCoeff());

    // Multi right-hand-side path.
    Eigen::MatrixXd bm(n, 3);
    for (Eigen::Index i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) bm(i, j) = rng.normal();
    Eigen::MatrixXd xm_want = dense.solve(bm);
    CHECK((bt.solve(bm) - xm_want).cwiseAbs().maxCoeff() < 1e-9);

    // upper_solve is L^{-T} z for the same (unique) factor.
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
    Eigen::VectorXd u_want = ld.transpose().triangularView<Eigen::Upper>().solve(z);
    CHECK((bt.upper_solve(z) - u_want).cwiseAbs().maxCoeff() < 1e-10);

    SECTION("lower-triangle-only input gives the same factor") {
        SpMat lower = full.triangularView<Eigen::Lower>().toDenseMatrix().sparseView();
        BlockTriCholesky bt2;
        REQUIRE(bt2.factorize(lower, G, T, nf));
        CHECK(bt2.logdet() == Catch::Approx(bt.logdet()).epsilon(1e-14));
        CHECK((bt2.solve(b) - x_want).cwiseAbs().maxCoeff() < 1e-10 * x_want.cwiseAbs().maxCoeff());
    }

    SECTION("border-free and single-slab shapes") {
        SpMat qk = q_kron.full();
        BlockTriCholesky noborder;
        REQUIRE(noborder.factorize(qk, G, T, 0));
        CHECK(noborder.logdet() == Catch::Approx(q_kron.factorize().logdet).epsilon(1e-12));

        SparseSym single = random_spd(G, 5, 2, 1.0);
        SpMat sf = single.full();
        BlockTriCholesky one;
        REQUIRE(one.factorize(sf, G, 1, 0));
        CHECK(one.logdet() == Catch::Approx(single.factorize().logdet).epsilon(1e-12));
    }

    SECTION("indefinite input is rejected, size mismatches throw") {
        Eigen::MatrixXd bad = full;
        bad(0, 0) = -5.0;
        SpMat bs = bad.sparseView();
        BlockTriCholesky btb;
        CHECK_FALSE(btb.factorize(bs, G, T, nf));
        CHECK_THROWS_AS(btb.factorize(sp, G, T + 1, nf), ConfigError);
    }
}

TEST_CASE("inverse marginals match the dense inverse blocks") {
    const int G = 5, T = 4, nf = 3;
    const Eigen::Index n = G * T + nf;
    SparseSym q_kron = kron_precision(precision_ar1(0.7, T), random_spd(G, 21, 2, 1.2));

    Eigen::MatrixXd full = Eigen::MatrixXd::Zero(n, n);
    full.topLeftCorner(G * T, G * T) = q_kron.dense();
    Rng rng(4);
    for (int i = 0; i < nf; ++i) {
        for (int j = 0; j < G * T; ++j) full(G * T + i, j) = full(j, G * T + i) = 0.2 * rng.normal();
    }
    Eigen::MatrixXd fb = Eigen::MatrixXd::Identity(nf, nf) * 5.0;
    fb(0, 1) = fb(1, 0) = 0.4;
    full.bottomRightCorner(nf, nf) = fb;

    Eigen::MatrixXd inv = full.inverse();
    SpMat sp = full.sparseView();
    BlockTriCholesky bt;
    REQUIRE(bt.factorize(sp, G, T, nf));
    const auto m = bt.inverse_marginals();

    CHECK((m.field_var - inv.diagonal().head(G * T)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((m.cross_cov - inv.topRightCorner(G * T, nf)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((m.border_cov - inv.bottomRightCorner(nf, nf)).cwiseAbs().maxCoeff() < 1e-10);

    // Variance of a mixed functional h = (e_i, x) assembled from the pieces.
    const int i = 2 * G + 3;
    Eigen::VectorXd x(nf);
    x << 0.5, -1.0, 2.0;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(n);
    h[i] = 1.0;
    h.tail(nf) = x;
    const double want = h.dot(inv * h);
    const double got = m.field_var[i] + 2.0 * x.dot(m.cross_cov.row(i)) +
                       x.dot(m.border_cov * x);
    CHECK(got == Catch::Approx(want).epsilon(1e-10));

    SECTION("border-free path") {
        SpMat qk = q_kron.full();
        BlockTriCholesky nb;
        REQUIRE(nb.factorize(qk, G, T, 0));
        const auto mm = nb.inverse_marginals();
        Eigen::MatrixXd qinv = q_kron.dense().inverse();
        CHECK((mm.field_var - qinv.diagonal()).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(mm.cross_cov.cols() == 0);
    }
}
