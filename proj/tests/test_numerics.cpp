#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "idp/numerics/hash.hpp"
#include "idp/numerics/prob.hpp"
#include "idp/numerics/ridge.hpp"
#include "support.hpp"

using namespace idp;
using idp::test::random_matrix;

TEST(Ridge, IdentityBasisReconstructsExactly) {
    const Matrix eye = Matrix::Identity(2, 2);
    const auto r = ridge_solve(eye, eye, 0.0);
    EXPECT_LE(max_abs_diff(r.reconstruction, eye), 1e-15);
    EXPECT_LE(max_abs_diff(r.mapping, eye), 1e-15);
}

TEST(Ridge, HugeLambdaShrinksToZero) {
    Rng rng = make_rng(1, 0);
    const Matrix t = random_matrix(5, 6, rng);
    const Matrix c = random_matrix(4, 6, rng);
    const auto r = ridge_solve(t, c, 1e12);
    EXPECT_LE(max_abs(r.reconstruction), 1e-9 * max_abs(t));
}

TEST(Ridge, MatchesGradientDescentOracle) {
    Rng rng = make_rng(2, 0);
    const Matrix t = random_matrix(3, 4, rng);
    const Matrix c = random_matrix(2, 4, rng);
    const auto r = ridge_solve(t, c, 0.5);
    const Matrix w = test::gd_ridge(t, c, 0.5);
    EXPECT_LE(max_abs_diff(r.reconstruction, w * c), 1e-5);
    EXPECT_LE(max_abs_diff(r.mapping, w), 1e-5);
}

TEST(Ridge, MatchesCglsOracleAcrossShapes) {
    Rng rng = make_rng(3, 0);
    for (int trial = 0; trial < 40; ++trial) {
        std::uniform_int_distribution<int> dim(1, 16);
        const int d = dim(rng);
        const int n = std::uniform_int_distribution<int>(1, std::min(8, d))(rng);
        const int r = std::uniform_int_distribution<int>(1, 8)(rng);
        const double lambda = std::array{0.0, 0.1, 1.0}[trial % 3];
        const Matrix t = random_matrix(r, d, rng);
        const Matrix c = random_matrix(n, d, rng);
        const auto got = ridge_solve(t, c, lambda);
        EXPECT_LE(max_abs_diff(got.mapping, test::cgls_ridge(t, c, lambda)), 1e-6) << "trial " << trial;
    }
}

TEST(Ridge, ClosedFormIsTheMinimizer) {
    Rng rng = make_rng(4, 0);
    const Matrix t = random_matrix(6, 5, rng);
    const Matrix c = random_matrix(3, 5, rng);
    const double lambda = 0.3;
    const auto r = ridge_solve(t, c, lambda);
    const double best = ridge_objective(t, c, r.mapping, lambda);
    for (int k = 0; k < 50; ++k) {
        const Matrix dw = random_matrix(6, 3, rng, 1e-3);
        EXPECT_LE(best, ridge_objective(t, c, r.mapping + dw, lambda) + 1e-12);
    }
}

TEST(Ridge, RowPermutationEquivariance) {
    Rng rng = make_rng(5, 0);
    const Matrix t = random_matrix(7, 4, rng);
    const Matrix c = random_matrix(3, 4, rng);
    std::vector<int> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix tp(7, 4);
    for (int i = 0; i < 7; ++i) tp.row(i) = t.row(perm[i]);
    const auto a = ridge_solve(t, c, 0.1);
    const auto b = ridge_solve(tp, c, 0.1);
    for (int i = 0; i < 7; ++i) EXPECT_LE((b.reconstruction.row(i) - a.reconstruction.row(perm[i])).norm(), 1e-12);
}

TEST(Ridge, RankDeficientAtZeroLambdaIsSingular) {
    Matrix c(3, 4);
    c << 1, 2, 3, 4, 2, 4, 6, 8, 0, 1, 0, 1;
    const Matrix t = Matrix::Ones(2, 4);
    try {
        (void)ridge_solve(t, c, 0.0);
        FAIL() << "expected SingularSystem";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::SingularSystem);
    }
    EXPECT_NO_THROW((void)ridge_solve(t, c, 0.1));
}

TEST(Ridge, DimensionMismatchAndBadLambda) {
    const Matrix t = Matrix::Ones(2, 3);
    const Matrix c = Matrix::Ones(2, 4);
    EXPECT_THROW((void)ridge_solve(t, c, 0.1), Error);
    try {
        (void)ridge_solve(t, Matrix::Ones(2, 3), -1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
    }
}

TEST(Ridge, ProjectorMapsTargetsToReconstructions) {
    Rng rng = make_rng(6, 0);
    const Matrix t = random_matrix(5, 6, rng);
    const Matrix c = random_matrix(3, 6, rng);
    const RidgeFactor f(c, 0.2);
    EXPECT_LE(max_abs_diff(t * f.projector(), ridge_solve(t, c, 0.2).reconstruction), 1e-12);
    const Matrix h0 = RidgeFactor(c, 0.0).projector();
    EXPECT_LE(max_abs_diff(h0 * h0, h0), 1e-10);
    EXPECT_LE(max_abs_diff(h0, h0.transpose()), 1e-12);
}

TEST(Softmax, Examples) {
    EXPECT_DOUBLE_EQ(softmax(Vector::Zero(1))[0], 1.0);
    const Vector flat = softmax(Vector::Constant(3, 4.2));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(flat[i], 1.0 / 3.0, 1e-15);

    Vector x(3);
    x << 1, 2, 3;
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const Vector p = softmax(x);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], std::exp(x[i]) / z, 1e-12);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
    Rng rng = make_rng(7, 0);
    for (int k = 0; k < 100; ++k) {
        const Vector x = random_matrix(9, 1, rng, 5.0).col(0);
        const Vector p = softmax(x);
        EXPECT_NEAR(p.sum(), 1.0, 1e-12);
        EXPECT_TRUE((p.array() > 0).all());
        const Vector q = softmax((x.array() + 123.4).matrix());
        EXPECT_LE((p - q).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Softmax, LargeLogitsStayFinite) {
    Vector x(2);
    x << 1000.0, 999.0;
    const Vector p = softmax(x);
    EXPECT_TRUE(p.allFinite());
    EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Softmax, RejectsEmptyAndNonFinite) {
    EXPECT_THROW((void)softmax(Vector(0)), Error);
    Vector x(2);
    x << 1.0, std::nan("");
    EXPECT_THROW((void)softmax(x), Error);
}

TEST(Kl, Examples) {
    Vector half(2);
    half << 0.5, 0.5;
    EXPECT_DOUBLE_EQ(kl_divergence(half, half), 0.0);
    Vector onehot(2);
    onehot << 1.0, 0.0;
    EXPECT_NEAR(kl_divergence(onehot, half), std::log(2.0), 1e-15);
}

TEST(Kl, MatchesDirectSummationAndIsNonnegative) {
    Rng rng = make_rng(8, 0);
    for (int k = 0; k < 200; ++k) {
        const Vector p = softmax(random_matrix(6, 1, rng, 2.0).col(0));
        const Vector q = softmax(random_matrix(6, 1, rng, 2.0).col(0));
        double direct = 0.0;
        for (int i = 0; i < 6; ++i) direct += p[i] * std::log(p[i] / q[i]);
        EXPECT_NEAR(kl_divergence(p, q), direct, 1e-10);
        EXPECT_GE(kl_divergence(p, q), 0.0);
        EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-15);
    }
}

TEST(Kl, ZeroQIsFloored) {
    Vector p(2), q(2);
    p << 0.5, 0.5;
    q << 1.0, 0.0;
    const double v = kl_divergence(p, q);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / kProbFloor), 1e-9);
}

TEST(Kl, LengthMismatch) {
    try {
        (void)kl_divergence(Vector::Ones(2) / 2, Vector::Ones(3) / 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
    }
}

TEST(Rng, DerivedStreamsAreDeterministicAndDistinct) {
    EXPECT_EQ(derive_seed(42, 7), derive_seed(42, 7));
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(42, i));
    EXPECT_EQ(seen.size(), 1000U);
    Rng a = make_rng(1, 2), b = make_rng(1, 2);
    for (int k = 0; k < 10; ++k) EXPECT_EQ(a(), b());
}

TEST(Fingerprint, SensitiveToValuesAndShape) {
    const Matrix a = Matrix::Ones(2, 3);
    Matrix b = a;
    b(1, 2) = std::nextafter(1.0, 2.0);
    EXPECT_EQ(Fingerprint{}.matrix(a).value(), Fingerprint{}.matrix(Matrix::Ones(2, 3)).value());
    EXPECT_NE(Fingerprint{}.matrix(a).value(), Fingerprint{}.matrix(b).value());
    EXPECT_NE(Fingerprint{}.matrix(a).value(), Fingerprint{}.matrix(Matrix::Ones(3, 2)).value());
    EXPECT_EQ(Fingerprint{}.hex().size(), 16U);
}

TEST(MatrixHelpers, VstackAndChecks) {
    const Matrix parts[] = {Matrix::Ones(1, 2), Matrix::Zero(2, 2)};
    const Matrix s = vstack(parts);
    EXPECT_EQ(s.rows(), 3);
    EXPECT_EQ(s(0, 1), 1.0);
    EXPECT_EQ(s(2, 0), 0.0);
    const Matrix bad[] = {Matrix::Ones(1, 2), Matrix::Ones(1, 3)};
    EXPECT_THROW((void)vstack(bad), Error);
}
