#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "test_support.hpp"

using namespace ucgsd;
using ucgsd::testing::random_diag;
using ucgsd::testing::random_matrix;
using ucgsd::testing::rel_frob;

namespace {

// Independent least-squares oracle: minimize sum w_ij (a_ij - r_i - c_j)^2 over the
// active entries with mean(r) == mean(c). Connected supports only.
std::pair<Vector, Vector> lsq_balance(const Matrix& a, const Matrix& w) {
    const std::size_t m = a.rows(), n = a.cols();
    std::size_t active = 0;
    for (double v : w.data()) active += v > 0.0;
    Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(active + 1, m + n);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(active + 1);
    std::size_t row = 0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (w(i, j) <= 0.0) continue;
            const double s = std::sqrt(w(i, j));
            sys(row, i) = s;
            sys(row, m + j) = s;
            rhs(row) = s * a(i, j);
            ++row;
        }
    for (std::size_t i = 0; i < m; ++i) sys(row, i) = 1.0 / m;
    for (std::size_t j = 0; j < n; ++j) sys(row, m + j) = -1.0 / n;
    const Eigen::VectorXd x = sys.colPivHouseholderQr().solve(rhs);
    Vector r(m), c(n);
    for (std::size_t i = 0; i < m; ++i) r[i] = x(i);
    for (std::size_t j = 0; j < n; ++j) c[j] = x(m + j);
    return {r, c};
}

double max_log_mean(const Matrix& wp, bool rows) {
    const std::size_t outer = rows ? wp.rows() : wp.cols(), inner = rows ? wp.cols() : wp.rows();
    double worst = 0.0;
    for (std::size_t a = 0; a < outer; ++a) {
        double s = 0.0;
        std::size_t cnt = 0;
        for (std::size_t b = 0; b < inner; ++b) {
            const double v = std::abs(rows ? wp(a, b) : wp(b, a));
            if (v < kStructuralZero) continue;
            s += std::log(v);
            ++cnt;
        }
        if (cnt) worst = std::max(worst, std::abs(s / cnt));
    }
    return worst;
}

Matrix reconstruct(const ScaleDecomposition& dec) { return scale_cols(scale_rows(dec.wp, dec.d), dec.e); }

} // namespace

TEST(RzCanonicalize, IdentityIsAlreadyBalanced) {
    const auto dec = rz_canonicalize(Matrix::identity(3));
    EXPECT_EQ(dec.wp, Matrix::identity(3));
    for (double v : dec.d) EXPECT_DOUBLE_EQ(v, 1.0);
    for (double v : dec.e) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(RzCanonicalize, TwoByTwoExample) {
    const auto dec = rz_canonicalize(Matrix{{1, 2}, {4, 8}});
    EXPECT_NEAR(dec.d[0], std::pow(2.0, -0.25), 1e-14);
    EXPECT_NEAR(dec.d[1], std::pow(2.0, 1.75), 1e-14);
    EXPECT_NEAR(dec.e[0], std::pow(2.0, 0.25), 1e-14);
    EXPECT_NEAR(dec.e[1], std::pow(2.0, 1.25), 1e-14);
    for (double v : dec.wp.data()) EXPECT_NEAR(v, 1.0, 1e-14);
    EXPECT_EQ(dec.iterations, 1u);
}

TEST(RzCanonicalize, OneByOneNegative) {
    const auto dec = rz_canonicalize(Matrix{{-3}});
    EXPECT_NEAR(dec.d[0], std::sqrt(3.0), 1e-15);
    EXPECT_NEAR(dec.e[0], std::sqrt(3.0), 1e-15);
    EXPECT_NEAR(dec.wp(0, 0), -1.0, 1e-15);
}

TEST(RzCanonicalize, ReconstructionBalanceSignsAndZeros) {
    Rng rng(11);
    for (int t = 0; t < 30; ++t) {
        const std::size_t m = 1 + rng.below(12), n = 1 + rng.below(12);
        Matrix w = random_matrix(m, n, rng);
        // sprinkle zeros while keeping every row/column and the support connected
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j % m && j != i % n && rng.uniform() < 0.3) w(i, j) = 0.0;
        const auto dec = rz_canonicalize(w);
        EXPECT_LE(rel_frob(reconstruct(dec).data(), w.data()), 1e-12);
        EXPECT_LE(max_log_mean(dec.wp, true), 1e-9);
        EXPECT_LE(max_log_mean(dec.wp, false), 1e-9);
        for (std::size_t k = 0; k < w.size(); ++k) {
            EXPECT_EQ(w.data()[k] == 0.0, dec.wp.data()[k] == 0.0);
            EXPECT_EQ(std::signbit(w.data()[k]), std::signbit(dec.wp.data()[k]));
        }
        for (double v : dec.d) EXPECT_GT(v, 0.0);
        for (double v : dec.e) EXPECT_GT(v, 0.0);
    }
}

TEST(RzCanonicalize, MatchesLeastSquaresOracle) {
    Rng rng(12);
    for (int t = 0; t < 20; ++t) {
        const std::size_t m = 2 + rng.below(8), n = 2 + rng.below(8);
        Matrix w = random_matrix(m, n, rng);
        if (t % 2)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (i != j % m && j != i % n && rng.uniform() < 0.3) w(i, j) = 0.0;
        Matrix a(m, n), mask(m, n);
        for (std::size_t k = 0; k < w.size(); ++k)
            if (w.data()[k] != 0.0) {
                a.data()[k] = std::log(std::abs(w.data()[k]));
                mask.data()[k] = 1.0;
            }
        const auto [r, c] = lsq_balance(a, mask);
        const auto dec = rz_canonicalize(w);
        for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(std::log(dec.d[i]), r[i], 1e-9);
        for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(std::log(dec.e[j]), c[j], 1e-9);
    }
}

TEST(RzCanonicalize, ScalingInvariance) {
    Rng rng(13);
    for (int t = 0; t < 40; ++t) {
        const std::size_t m = 1 + rng.below(20), n = 1 + rng.below(20);
        const Matrix w = random_matrix(m, n, rng);
        const Matrix scaled = scale_cols(scale_rows(w, random_diag(m, rng, 6)), random_diag(n, rng, 6));
        EXPECT_LE(rel_frob(canonical_project(scaled).data(), canonical_project(w).data()), 1e-8);
    }
}

TEST(RzCanonicalize, CanonicalFixedPoint) {
    Rng rng(14);
    const Matrix wp = canonical_project(random_matrix(7, 5, rng));
    const auto again = rz_canonicalize(wp);
    for (double v : again.d) EXPECT_NEAR(v, 1.0, 1e-9);
    for (double v : again.e) EXPECT_NEAR(v, 1.0, 1e-9);
    EXPECT_LE(rel_frob(canonical_project(wp).data(), wp.data()), 1e-12);
}

TEST(RzCanonicalize, ZeroRowGetsUnitScale) {
    const auto dec = rz_canonicalize(Matrix{{1, 2}, {0, 0}, {4, 8}});
    EXPECT_EQ(dec.d[1], 1.0);
    EXPECT_EQ(dec.wp(1, 0), 0.0);
    EXPECT_EQ(dec.wp(1, 1), 0.0);
}

TEST(RzCanonicalize, DegenerateAndNumericErrors) {
    EXPECT_THROW(rz_canonicalize(Matrix(3, 3)), DegenerateInputError);
    EXPECT_THROW(rz_canonicalize(Matrix{{1e-31, 0}}), DegenerateInputError);
    EXPECT_THROW(rz_canonicalize(Matrix{{1, INFINITY}}), NumericError);
}

TEST(RzCanonicalize, SparseNonConvergenceCarriesResidual) {
    Rng rng(15);
    Matrix w = random_matrix(6, 6, rng);
    for (std::size_t i = 0; i < 6; ++i) w(i, (i + 3) % 6) = 0.0;
    try {
        rz_canonicalize(w, 1e-12, 1);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.residual(), 1e-12);
        EXPECT_EQ(e.iterations(), 1u);
    }
    const auto ok = rz_canonicalize(w);
    EXPECT_GT(ok.iterations, 1u);
    EXPECT_LE(ok.residual, 1e-12);
}

TEST(BalanceLog, ZerosGiveZeroOffsets) {
    const auto b = balance_log(Matrix(3, 4), Matrix(3, 4, 1.0));
    for (double v : b.row_offsets) EXPECT_EQ(v, 0.0);
    for (double v : b.col_offsets) EXPECT_EQ(v, 0.0);
}

TEST(BalanceLog, AdditivelySeparableRecoveredExactly) {
    const Vector rho{0.5, -1.0, 2.0}, gam{1.0, 3.0};
    Matrix a(3, 2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) a(i, j) = rho[i] + gam[j];
    const auto b = balance_log(a, Matrix(3, 2, 1.0));
    EXPECT_LE(b.residual, 1e-14);
    // mean(rho) = 0.5, mean(gam) = 2, grand mean 2.5, equal split delta = 1.25
    const double mr = 0.5, mg = 2.0, mu = mr + mg;
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b.row_offsets[i], rho[i] - mr + mu / 2, 1e-14);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(b.col_offsets[j], gam[j] - mg + mu / 2, 1e-14);
}

TEST(BalanceLog, LogOfCanonicalExampleHasZeroResidual) {
    const double l2 = std::log(2.0);
    const auto b = balance_log(Matrix{{0, l2}, {2 * l2, 3 * l2}}, Matrix(2, 2, 1.0));
    EXPECT_LE(b.residual, 1e-15);
}

TEST(BalanceLog, WeightedMatchesOracle) {
    Rng rng(16);
    Matrix a(4, 5), w(4, 5);
    for (auto& v : a.data()) v = rng.normal();
    for (auto& v : w.data()) v = 1.0 + rng.below(9);
    const auto b = balance_log(a, w);
    const auto [r, c] = lsq_balance(a, w);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b.row_offsets[i], r[i], 1e-9);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(b.col_offsets[j], c[j], 1e-9);
}

TEST(BalanceLog, BadArguments) {
    EXPECT_THROW(balance_log(Matrix(2, 2), Matrix(2, 3)), ShapeError);
    EXPECT_THROW(balance_log(Matrix(2, 2), Matrix(2, 2)), DegenerateInputError);
    EXPECT_THROW(balance_log(Matrix(2, 2), Matrix(2, 2, 1.0), 0.0), ConfigError);
}

TEST(UcAdjoint, Examples) {
    EXPECT_EQ(uc_adjoint(Matrix::identity(2)), Matrix::identity(2));
    const Matrix adj = uc_adjoint(Matrix{{1, 2}, {4, 8}});
    for (double v : adj.data()) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(UcAdjoint, EqualsScaledTransposeAndIsGaugeInvariant) {
    Rng rng(17);
    for (int t = 0; t < 10; ++t) {
        const Matrix w = random_matrix(5, 3, rng);
        const auto dec = rz_canonicalize(w);
        const Matrix via_scales = scale_cols(scale_rows(transpose(w), reciprocal(dec.e)), reciprocal(dec.d));
        EXPECT_LE(rel_frob(uc_adjoint(w).data(), via_scales.data()), 1e-12);
        const Matrix gw = scale_cols(scale_rows(w, random_diag(5, rng, 3)), random_diag(3, rng, 3));
        EXPECT_LE(rel_frob(uc_adjoint(gw).data(), uc_adjoint(w).data()), 1e-9);
    }
}

TEST(UcAdjoint, CanonicalMatrixAdjointIsTranspose) {
    Rng rng(18);
    const Matrix wp = canonical_project(random_matrix(4, 6, rng));
    EXPECT_LE(rel_frob(uc_adjoint(wp).data(), transpose(wp).data()), 1e-12);
}

TEST(CanonicalProject, IdentityAndIdempotence) {
    EXPECT_EQ(canonical_project(Matrix::identity(4)), Matrix::identity(4));
    Rng rng(19);
    const Matrix w = random_matrix(6, 9, rng);
    const Matrix p = canonical_project(w);
    EXPECT_LE(rel_frob(canonical_project(p).data(), p.data()), 1e-12);
}

TEST(CanonicalizeKernel, AllOnes) {
    Tensor4 k(2, 2, 1, 1);
    for (auto& v : k.data()) v = 1.0;
    const auto dec = canonicalize_kernel(k);
    for (double v : dec.d) EXPECT_DOUBLE_EQ(v, 1.0);
    for (double v : dec.e) EXPECT_DOUBLE_EQ(v, 1.0);
    for (double v : dec.kp.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(CanonicalizeKernel, OneByOneSpatialReducesToMatrixCase) {
    Tensor4 k(2, 2, 1, 1, {1, 2, 4, 8});
    const auto dk = canonicalize_kernel(k);
    const auto dm = rz_canonicalize(Matrix{{1, 2}, {4, 8}});
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_NEAR(dk.d[i], dm.d[i], 1e-14);
        EXPECT_NEAR(dk.e[i], dm.e[i], 1e-14);
    }
    for (double v : dk.kp.data()) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(CanonicalizeKernel, ReconstructionAndChannelMeans) {
    Rng rng(20);
    Tensor4 k = he_normal_kernel(3, 4, 3, 3, rng);
    k.at(0, 1, 1, 1) = 0.0;
    const auto dec = canonicalize_kernel(k);
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t u = 0; u < 3; ++u)
                for (std::size_t v = 0; v < 3; ++v)
                    EXPECT_NEAR(dec.d[o] * dec.kp.at(o, i, u, v) * dec.e[i], k.at(o, i, u, v),
                                1e-12 * std::abs(k.at(o, i, u, v)) + 1e-300);
    // per-channel geometric means of nonzero |kp| over all taps
    for (std::size_t o = 0; o < 3; ++o) {
        double s = 0.0, cnt = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t t = 0; t < 9; ++t) {
                const double v = std::abs(dec.kp.at(o, i, t / 3, t % 3));
                if (v > 0.0) s += std::log(v), cnt += 1;
            }
        EXPECT_NEAR(s / cnt, 0.0, 1e-9);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        double s = 0.0, cnt = 0.0;
        for (std::size_t o = 0; o < 3; ++o)
            for (std::size_t t = 0; t < 9; ++t) {
                const double v = std::abs(dec.kp.at(o, i, t / 3, t % 3));
                if (v > 0.0) s += std::log(v), cnt += 1;
            }
        EXPECT_NEAR(s / cnt, 0.0, 1e-9);
    }
}

TEST(CanonicalizeKernel, ChannelGaugeInvariance) {
    Rng rng(21);
    const Tensor4 k = he_normal_kernel(3, 2, 3, 3, rng);
    const auto so = random_diag(3, rng, 3), si = random_diag(2, rng, 3);
    Tensor4 g = k;
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t u = 0; u < 3; ++u)
                for (std::size_t v = 0; v < 3; ++v) g.at(o, i, u, v) *= so[o] / si[i];
    EXPECT_LE(rel_frob(canonicalize_kernel(g).kp.data(), canonicalize_kernel(k).kp.data()), 1e-9);
}

TEST(CanonicalizeKernel, ZeroChannelIsDegenerate) {
    Rng rng(22);
    Tensor4 k = he_normal_kernel(2, 2, 2, 2, rng);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t t = 0; t < 4; ++t) k.at(1, i, t / 2, t % 2) = 0.0;
    EXPECT_THROW(canonicalize_kernel(k), DegenerateInputError);
}

TEST(LayerFrame, AugmentedBiasFrameIsGaugeCovariant) {
    Rng rng(23);
    const Matrix w = random_matrix(4, 3, rng);
    const Vector b = ucgsd::testing::random_vector(4, rng);
    const auto so = random_diag(4, rng, 3), si = random_diag(3, rng, 3);
    const Matrix gw = scale_cols(scale_rows(w, so), reciprocal(si));
    Vector gb = b;
    for (std::size_t i = 0; i < 4; ++i) gb[i] *= so[i];
    const auto f = dense_frame(w, &b), g = dense_frame(gw, &gb);
    // d and e individually carry an arbitrary common factor; the entry scales do not
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_NEAR(g.d[i] * g.e[j] / (f.d[i] * f.e[j] * so[i] / si[j]), 1.0, 1e-10);
        EXPECT_NEAR(g.bias_scales()[i] / (f.bias_scales()[i] * so[i]), 1.0, 1e-10);
    }
}
