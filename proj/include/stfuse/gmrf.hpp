#pragma once

// Sparse symmetric algebra for Gaussian Markov random fields: the AR(1)
// temporal precision, Kronecker space-time assembly, Cholesky factorization
// with jitter escalation, log-determinants, sampling, and the Takahashi
// recursion for selected entries of the inverse.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <unsupported/Eigen/KroneckerProduct>

#include "core.hpp"

namespace stfuse {

using SpMat = Eigen::SparseMatrix<double>;  // column-major, int indices

// Symmetric sparse matrix stored as its lower triangle, with a lazily built
// and cached Cholesky factorization (AMD fill-reducing ordering). If the
// plain factorization fails, a jitter of {1e-10, 1e-8, 1e-6} times the mean
// diagonal is added before giving up with NumericalError.
class SparseSym {
public:
    using Llt = Eigen::SimplicialLLT<SpMat, Eigen::Lower>;

    struct Factor {
        Llt llt;
        double logdet = 0.0;
        double jitter = 0.0;  // absolute value added to the diagonal, 0 if none
    };

    SparseSym() = default;

    // Accepts either a full symmetric matrix or just its lower triangle;
    // only the lower triangle is kept.
    explicit SparseSym(const SpMat& m) {
        if (m.rows() != m.cols()) throw ConfigError("SparseSym: matrix must be square");
        lower_ = m.triangularView<Eigen::Lower>();
        lower_.makeCompressed();
    }

    Eigen::Index dim() const { return lower_.rows(); }
    const SpMat& lower() const { return lower_; }

    SpMat full() const {
        SpMat f = lower_.selfadjointView<Eigen::Lower>();
        return f;
    }

    Eigen::MatrixXd dense() const { return Eigen::MatrixXd(full()); }

    const Factor& factorize() const {
        if (factor_) return *factor_;
        if (dim() == 0) throw ConfigError("SparseSym: cannot factorize empty matrix");
        const double mean_diag = lower_.diagonal().cwiseAbs().mean();
        auto f = std::make_shared<Factor>();
        for (double scale : {0.0, 1e-10, 1e-8, 1e-6}) {
            const double jitter = scale * mean_diag;
            SpMat m = lower_;
            if (jitter > 0.0) {
                SpMat eye(dim(), dim());
                eye.setIdentity();
                m = SpMat((lower_ + jitter * eye).triangularView<Eigen::Lower>());
            }
            f->llt.compute(m);
            if (f->llt.info() != Eigen::Success) continue;
            const double ld = 2.0 * f->llt.matrixL().nestedExpression().diagonal().array().log().sum();
            if (!std::isfinite(ld)) continue;
            f->logdet = ld;
            f->jitter = jitter;
            factor_ = std::move(f);
            if (jitter > 0.0) {
                log::debug(strf("SparseSym: factorization needed jitter %.3e", jitter));
            }
            return *factor_;
        }
        throw NumericalError(strf("SparseSym: Cholesky failed for %ld x %ld matrix even with "
                                  "jitter up to 1e-6 x mean diagonal",
                                  static_cast<long>(dim()), static_cast<long>(dim())));
    }

    bool factorized() const { return factor_ != nullptr; }

    double logdet() const { return factorize().logdet; }

    Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
        if (b.size() != dim()) throw ConfigError("SparseSym::solve: size mismatch");
        return factorize().llt.solve(b);
    }

    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const {
        if (b.rows() != dim()) throw ConfigError("SparseSym::solve: size mismatch");
        return factorize().llt.solve(b);
    }

private:
    SpMat lower_;
    mutable std::shared_ptr<Factor> factor_;
};

// Unit-innovation AR(1) precision: tridiagonal with diagonal
// (1, 1+rho^2, ..., 1+rho^2, 1) and off-diagonal -rho, so the stationary
// marginal variance is 1/(1-rho^2). The T=1 matrix is [1-rho^2], the
// precision of the stationary initial state.
inline SparseSym precision_ar1(double rho, int T) {
    if (!(std::abs(rho) < 1.0)) throw ConfigError(strf("precision_ar1: |rho| must be < 1, got %g", rho));
    if (T < 1) throw ConfigError("precision_ar1: T must be >= 1");
    SpMat q(T, T);
    if (T == 1) {
        q.insert(0, 0) = 1.0 - rho * rho;
    } else {
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(static_cast<std::size_t>(3 * T));
        for (int t = 0; t < T; ++t) {
            const bool end = (t == 0 || t == T - 1);
            trips.emplace_back(t, t, end ? 1.0 : 1.0 + rho * rho);
            if (t + 1 < T) trips.emplace_back(t + 1, t, -rho);
        }
        q.setFromTriplets(trips.begin(), trips.end());
    }
    return SparseSym(q);
}

// Q = Q_T kron Q_S with time-major ordering: entry for vertex g at time t
// sits at index (t-1)*G + g.
inline SparseSym kron_precision(const SparseSym& q_t, const SparseSym& q_s) {
    if (q_t.dim() < 1 || q_s.dim() < 1) throw ConfigError("kron_precision: empty factor");
    SpMat full_t = q_t.full();
    SpMat full_s = q_s.full();
    SpMat prod = Eigen::kroneckerProduct(full_t, full_s);
    return SparseSym(prod);
}

// Multivariate normal in precision form.
struct GaussianConditional {
    Eigen::VectorXd mean;
    SparseSym precision;

    Eigen::Index dim() const { return mean.size(); }
};

// n independent draws (one per column), deterministic in the seed. Uses
// x = mean + Pinv * U^{-1} z with Q = P^T L L^T P, so cov(x) = Q^{-1}.
inline Eigen::MatrixXd sample_gmrf(const GaussianConditional& cond, int n, std::uint64_t seed) {
    if (n < 0) throw ConfigError("sample_gmrf: n must be nonnegative");
    if (cond.mean.size() != cond.precision.dim()) {
        throw ConfigError("sample_gmrf: mean / precision dimension mismatch");
    }
    const auto& f = cond.precision.factorize();
    Rng rng(seed);
    const Eigen::Index d = cond.dim();
    Eigen::MatrixXd out(d, n);
    Eigen::VectorXd z(d);
    for (int j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < d; ++i) z[i] = rng.normal();
        out.col(j) = cond.mean + f.llt.permutationPinv() * f.llt.matrixU().solve(z).eval();
    }
    return out;
}

// Reusable Cholesky for repeated factorizations with a fixed sparsity
// pattern (the hyperparameter search refactorizes the same-shaped posterior
// precision hundreds of times). analyze() once, then factorize() per value
// set; factorize() reports failure instead of throwing so the optimizer can
// treat it as an infinite objective.
class RepeatSolver {
public:
    using Llt = SparseSym::Llt;

    void analyze(const SparseSym& q) {
        lower_pattern_ = q.lower();
        eye_.resize(q.dim(), q.dim());
        eye_.setIdentity();
        llt_.analyzePattern(lower_pattern_);
        analyzed_ = true;
        ok_ = false;
    }

    bool analyzed() const { return analyzed_; }

    bool factorize(const SparseSym& q) {
        if (!analyzed_) throw ConfigError("RepeatSolver: analyze() must be called first");
        const double mean_diag = q.lower().diagonal().cwiseAbs().mean();
        for (double scale : {0.0, 1e-10, 1e-8, 1e-6}) {
            const double jitter = scale * mean_diag;
            if (jitter > 0.0) {
                SpMat m = SpMat((q.lower() + jitter * eye_).triangularView<Eigen::Lower>());
                llt_.factorize(m);
            } else {
                llt_.factorize(q.lower());
            }
            if (llt_.info() != Eigen::Success) continue;
            const double ld = 2.0 * llt_.matrixL().nestedExpression().diagonal().array().log().sum();
            if (!std::isfinite(ld)) continue;
            logdet_ = ld;
            jitter_ = jitter;
            ok_ = true;
            return true;
        }
        ok_ = false;
        return false;
    }

    bool ok() const { return ok_; }
    double logdet() const { return logdet_; }
    double jitter() const { return jitter_; }

    Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return llt_.solve(b); }
    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return llt_.solve(b); }
    const Llt& llt() const { return llt_; }

private:
    Llt llt_;
    SpMat lower_pattern_;
    SpMat eye_;
    double logdet_ = 0.0;
    double jitter_ = 0.0;
    bool analyzed_ = false;
    bool ok_ = false;
};

// Cholesky factorization specialized to the space-time posterior precision:
// T diagonal blocks of size G coupled block-tridiagonally in time, plus a
// small dense border (fixed effects) in the last nf rows. The blocks fill in
// almost completely during elimination, so they are treated as dense and the
// work runs through Eigen's dense kernels; that is roughly an order of
// magnitude faster here than a general sparse factorization of the same
// matrix. Without pivoting the Cholesky factor is unique, so results match
// a dense factorization exactly (up to roundoff).
class BlockTriCholesky {
public:
    // Input: the full or lower-triangular sparse precision, time-major
    // layout (slab t occupies rows [t*G, (t+1)*G), border rows at the end).
    // Same jitter ladder as SparseSym on failure; returns false if even the
    // largest jitter cannot rescue the factorization.
    bool factorize(const SpMat& p, int G, int T, int nf) {
        if (G < 1 || T < 1 || nf < 0) throw ConfigError("BlockTriCholesky: bad block sizes");
        if (p.rows() != p.cols() || p.rows() != static_cast<Eigen::Index>(G) * T + nf) {
            throw ConfigError("BlockTriCholesky: matrix size does not match G*T+nf");
        }
        g_ = G;
        t_ = T;
        nf_ = nf;

        // Scatter the lower triangle into dense blocks.
        std::vector<Eigen::MatrixXd> d(static_cast<std::size_t>(T), Eigen::MatrixXd::Zero(G, G));
        std::vector<Eigen::MatrixXd> e(static_cast<std::size_t>(T > 0 ? T - 1 : 0),
                                       Eigen::MatrixXd::Zero(G, G));
        std::vector<Eigen::MatrixXd> r(static_cast<std::size_t>(T), Eigen::MatrixXd::Zero(nf, G));
        Eigen::MatrixXd f = Eigen::MatrixXd::Zero(nf, nf);
        const Eigen::Index n_xi = static_cast<Eigen::Index>(G) * T;
        double diag_sum = 0.0;
        for (int k = 0; k < p.outerSize(); ++k) {
            for (SpMat::InnerIterator it(p, k); it; ++it) {
                const Eigen::Index i = it.row(), j = it.col();
                if (i < j) continue;  // keep the lower triangle only
                if (i == j) diag_sum += std::abs(it.value());
                if (j < n_xi) {
                    const int tj = static_cast<int>(j / G);
                    const int ti = (i < n_xi) ? static_cast<int>(i / G) : -1;
                    if (ti == tj) {
                        auto& m = d[static_cast<std::size_t>(tj)];
                        m(i - tj * G, j - tj * G) = it.value();
                        m(j - tj * G, i - tj * G) = it.value();
                    } else if (ti == tj + 1) {
                        e[static_cast<std::size_t>(tj)](i - ti * G, j - tj * G) = it.value();
                    } else if (ti < 0) {
                        r[static_cast<std::size_t>(tj)](i - n_xi, j - tj * G) = it.value();
                    } else {
                        throw ConfigError("BlockTriCholesky: entry outside the block-tridiagonal band");
                    }
                } else {
                    f(i - n_xi, j - n_xi) = it.value();
                    f(j - n_xi, i - n_xi) = it.value();
                }
            }
        }
        const double mean_diag = diag_sum / static_cast<double>(p.rows());

        for (double scale : {0.0, 1e-10, 1e-8, 1e-6}) {
            const double jitter = scale * mean_diag;
            if (try_factorize(d, e, r, f, jitter)) {
                jitter_ = jitter;
                if (jitter > 0.0) {
                    log::debug(strf("BlockTriCholesky: factorization needed jitter %.3e", jitter));
                }
                return true;
            }
        }
        return false;
    }

    double logdet() const { return logdet_; }
    double jitter() const { return jitter_; }
    Eigen::Index dim() const { return static_cast<Eigen::Index>(g_) * t_ + nf_; }

    // Solves (L L^T) x = b for one or many right-hand sides.
    Eigen::MatrixXd solve(Eigen::MatrixXd b) const {
        forward(b);
        backward(b);
        return b;
    }

    Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
        Eigen::MatrixXd m = b;
        forward(m);
        backward(m);
        return m.col(0);
    }

    // L^{-T} z: maps iid standard normals to draws with covariance P^{-1}.
    Eigen::VectorXd upper_solve(const Eigen::VectorXd& z) const {
        Eigen::MatrixXd m = z;
        backward(m);
        return m.col(0);
    }

    // The pieces of P^{-1} needed for per-coordinate variances of linear
    // functionals h^T u where h touches one field coordinate plus the border:
    // Var = field_var[i] + 2 x . cross_cov.row(i) + x^T border_cov x.
    struct InverseMarginals {
        Eigen::VectorXd field_var;   // diag of P^{-1} over the G*T field rows
        Eigen::MatrixXd cross_cov;   // Cov(field, border), G*T x nf
        Eigen::MatrixXd border_cov;  // Cov(border), nf x nf
    };

    // Diagonal of the inverse without forming it: a backward block recursion
    // over the time chain gives the field diagonal of B^{-1} (B = the
    // block-tridiagonal part), and the bordered-inverse identity
    //   P^{-1} = [[B^{-1} + W Ft^{-1} W^T, -W Ft^{-1}], [., Ft^{-1}]],
    // with W = B^{-1} C^T and Ft the border Schur complement, adds the
    // fixed-effect corrections. Cost is a few G^3 per time slab.
    InverseMarginals inverse_marginals() const {
        const int G = g_, T = t_;
        InverseMarginals out;
        out.field_var.resize(static_cast<Eigen::Index>(G) * T);

        // W = L_B^{-T} S^T: backward substitution through the chain only.
        Eigen::MatrixXd w(static_cast<Eigen::Index>(G) * T, nf_);
        if (nf_ > 0) {
            for (int t = T - 1; t >= 0; --t) {
                auto wt = w.middleRows(static_cast<Eigen::Index>(t) * G, G);
                wt = ls_[static_cast<std::size_t>(t)].transpose();
                if (t + 1 < T) {
                    wt.noalias() -= le_[static_cast<std::size_t>(t)].transpose() *
                                    w.middleRows(static_cast<Eigen::Index>(t + 1) * G, G);
                }
                ld_[static_cast<std::size_t>(t)].transpose().triangularView<Eigen::Upper>().solveInPlace(wt);
            }
            Eigen::MatrixXd ftinv = Eigen::MatrixXd::Identity(nf_, nf_);
            lf_.triangularView<Eigen::Lower>().solveInPlace(ftinv);
            lf_.transpose().triangularView<Eigen::Upper>().solveInPlace(ftinv);
            out.border_cov = ftinv;
            out.cross_cov.noalias() = -w * ftinv;
        } else {
            out.cross_cov.resize(static_cast<Eigen::Index>(G) * T, 0);
            out.border_cov.resize(0, 0);
        }

        // diag(B^{-1}) via the Takahashi recursion on the block-bidiagonal
        // factor: Sigma_T = L_T^{-T} L_T^{-1}, then
        // Sigma_t = L_t^{-T} (I + M_t^T Sigma_{t+1} M_t) L_t^{-1}.
        Eigen::MatrixXd sigma;
        for (int t = T - 1; t >= 0; --t) {
            Eigen::MatrixXd inner = Eigen::MatrixXd::Identity(G, G);
            if (t + 1 < T) {
                const Eigen::MatrixXd k =
                    sigma * le_[static_cast<std::size_t>(t)];
                inner.noalias() += le_[static_cast<std::size_t>(t)].transpose() * k;
            }
            // Sigma_t = L^{-T} A L^{-1} with A symmetric: apply L^{-T} twice
            // with a transpose in between.
            const auto& l = ld_[static_cast<std::size_t>(t)];
            l.transpose().triangularView<Eigen::Upper>().solveInPlace(inner);
            Eigen::MatrixXd flipped = inner.transpose();
            l.transpose().triangularView<Eigen::Upper>().solveInPlace(flipped);
            sigma = std::move(flipped);
            out.field_var.segment(static_cast<Eigen::Index>(t) * G, G) = sigma.diagonal();
        }

        // Border correction to the field diagonal: diag(W Ft^{-1} W^T).
        if (nf_ > 0) {
            out.field_var.array() -= (w.array() * out.cross_cov.array()).rowwise().sum();
        }
        return out;
    }

private:
    bool try_factorize(std::vector<Eigen::MatrixXd> d, std::vector<Eigen::MatrixXd> e,
                       std::vector<Eigen::MatrixXd> r, Eigen::MatrixXd f, double jitter) {
        const int T = t_;
        if (jitter > 0.0) {
            for (auto& m : d) m.diagonal().array() += jitter;
            f.diagonal().array() += jitter;
        }
        ld_.assign(static_cast<std::size_t>(T), Eigen::MatrixXd());
        le_.assign(static_cast<std::size_t>(T > 0 ? T - 1 : 0), Eigen::MatrixXd());
        ls_.assign(static_cast<std::size_t>(T), Eigen::MatrixXd());
        double logdet = 0.0;
        for (int t = 0; t < T; ++t) {
            Eigen::LLT<Eigen::MatrixXd> llt(d[static_cast<std::size_t>(t)]);
            if (llt.info() != Eigen::Success) return false;
            Eigen::MatrixXd l = llt.matrixL();
            if ((l.diagonal().array() <= 0.0).any()) return false;
            logdet += 2.0 * l.diagonal().array().log().sum();

            // Scale the couplings hanging off this block: E_t <- E_t L^{-T},
            // S_t <- (R_t - S_{t-1} M_{t-1}^T) L^{-T}.
            Eigen::MatrixXd s_rhs = r[static_cast<std::size_t>(t)];
            if (t > 0 && nf_ > 0) {
                s_rhs.noalias() -= ls_[static_cast<std::size_t>(t - 1)] *
                                   le_[static_cast<std::size_t>(t - 1)].transpose();
            }
            if (nf_ > 0) {
                ls_[static_cast<std::size_t>(t)] =
                    l.triangularView<Eigen::Lower>().solve(s_rhs.transpose()).transpose();
                f.selfadjointView<Eigen::Lower>().rankUpdate(ls_[static_cast<std::size_t>(t)], -1.0);
            }
            if (t + 1 < T) {
                le_[static_cast<std::size_t>(t)] =
                    l.triangularView<Eigen::Lower>()
                        .solve(e[static_cast<std::size_t>(t)].transpose())
                        .transpose();
                // Lower triangle only: the next block's LLT never reads the rest.
                d[static_cast<std::size_t>(t + 1)]
                    .selfadjointView<Eigen::Lower>()
                    .rankUpdate(le_[static_cast<std::size_t>(t)], -1.0);
            }
            ld_[static_cast<std::size_t>(t)] = std::move(l);
        }
        if (nf_ > 0) {
            Eigen::LLT<Eigen::MatrixXd> llt(f);
            if (llt.info() != Eigen::Success) return false;
            lf_ = llt.matrixL();
            if ((lf_.diagonal().array() <= 0.0).any()) return false;
            logdet += 2.0 * lf_.diagonal().array().log().sum();
        } else {
            lf_.resize(0, 0);
        }
        if (!std::isfinite(logdet)) return false;
        logdet_ = logdet;
        return true;
    }

    // In-place L y = b over all columns of b.
    void forward(Eigen::MatrixXd& b) const {
        const int G = g_, T = t_;
        for (int t = 0; t < T; ++t) {
            auto bt = b.middleRows(static_cast<Eigen::Index>(t) * G, G);
            if (t > 0) {
                bt.noalias() -= le_[static_cast<std::size_t>(t - 1)] *
                                b.middleRows(static_cast<Eigen::Index>(t - 1) * G, G);
            }
            ld_[static_cast<std::size_t>(t)].triangularView<Eigen::Lower>().solveInPlace(bt);
        }
        if (nf_ > 0) {
            auto bf = b.bottomRows(nf_);
            for (int t = 0; t < T; ++t) {
                bf.noalias() -= ls_[static_cast<std::size_t>(t)] *
                                b.middleRows(static_cast<Eigen::Index>(t) * G, G);
            }
            lf_.triangularView<Eigen::Lower>().solveInPlace(bf);
        }
    }

    // In-place L^T x = y over all columns.
    void backward(Eigen::MatrixXd& b) const {
        const int G = g_, T = t_;
        if (nf_ > 0) {
            auto bf = b.bottomRows(nf_);
            lf_.transpose().triangularView<Eigen::Upper>().solveInPlace(bf);
        }
        for (int t = T - 1; t >= 0; --t) {
            auto bt = b.middleRows(static_cast<Eigen::Index>(t) * G, G);
            if (nf_ > 0) {
                bt.noalias() -= ls_[static_cast<std::size_t>(t)].transpose() * b.bottomRows(nf_);
            }
            if (t + 1 < T) {
                bt.noalias() -= le_[static_cast<std::size_t>(t)].transpose() *
                                b.middleRows(static_cast<Eigen::Index>(t + 1) * G, G);
            }
            ld_[static_cast<std::size_t>(t)].transpose().triangularView<Eigen::Upper>().solveInPlace(bt);
        }
    }

    int g_ = 0, t_ = 0, nf_ = 0;
    std::vector<Eigen::MatrixXd> ld_;  // diagonal Cholesky blocks
    std::vector<Eigen::MatrixXd> le_;  // scaled subdiagonal couplings M_t = E_t L_t^{-T}
    std::vector<Eigen::MatrixXd> ls_;  // scaled border rows S_t
    Eigen::MatrixXd lf_;               // border Cholesky block
    double logdet_ = 0.0;
    double jitter_ = 0.0;
};

// Diagonal of Q^{-1} via the Takahashi recursion over the filled Cholesky
// pattern. Exact for the diagonal because the filled pattern is chordal.
inline Eigen::VectorXd inverse_diagonal(const SparseSym& q) {
    const auto& f = q.factorize();
    SpMat L = f.llt.matrixL();
    L.makeCompressed();
    const Eigen::Index n = L.rows();
    const int* outer = L.outerIndexPtr();
    const int* inner = L.innerIndexPtr();
    const double* lv = L.valuePtr();

    SpMat Z = L;  // same pattern; values become entries of (P Q P^T)^{-1}
    double* zv = Z.valuePtr();

    // Value of Z at (row i, col j) with i >= j, zero if outside the pattern.
    auto zat = [&](int i, int j) -> double {
        const int* lo = inner + outer[j];
        const int* hi = inner + outer[j + 1];
        const int* it = std::lower_bound(lo, hi, i);
        if (it == hi || *it != i) return 0.0;
        return zv[it - inner];
    };

    for (Eigen::Index j = n - 1; j >= 0; --j) {
        const int pj = static_cast<int>(j);
        const double ljj = lv[outer[pj]];  // diagonal entry comes first (sorted rows)
        for (int p = outer[pj + 1] - 1; p >= outer[pj]; --p) {
            const int i = inner[p];
            double s = 0.0;
            for (int pk = outer[pj] + 1; pk < outer[pj + 1]; ++pk) {
                const int k = inner[pk];
                const double zki = (k >= i) ? zat(k, i) : zat(i, k);
                s += lv[pk] * zki;
            }
            if (i == pj) {
                zv[p] = 1.0 / (ljj * ljj) - s / ljj;
            } else {
                zv[p] = -s / ljj;
            }
        }
    }

    const auto& perm = f.llt.permutationP();
    Eigen::VectorXd diag(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int pi = perm.indices()(i);
        diag[i] = zv[outer[pi]];
    }
    return diag;
}

}  // namespace stfuse
