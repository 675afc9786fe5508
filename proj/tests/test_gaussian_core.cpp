#include "bt/errors.hpp"
#include "bt/gaussian_core.hpp"

#include "doctest.h"
#include "test_support.hpp"

#include <cmath>
#include <cstring>

using namespace bt;
using bt::testing::empirical_covariance;
using bt::testing::random_spd;
using bt::testing::rel_frobenius;

TEST_CASE("cholesky of identity and diagonal matrices") {
    CHECK(cholesky(SpdMatrix::identity(3)).lower == Matrix::Identity(3, 3));
    Matrix d(2, 2);
    d << 4, 0, 0, 9;
    const CholeskyFactor f = cholesky(SpdMatrix(d));
    Matrix expected(2, 2);
    expected << 2, 0, 0, 3;
    CHECK(f.lower == expected);
    CHECK(f.jitter == 0.0);
}

TEST_CASE("cholesky multiply-back on random SPD matrices") {
    RandomStream rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const auto n = static_cast<Eigen::Index>(1 + rng.below(30));
        const SpdMatrix m = random_spd(rng, n, trial % 3 == 0 ? 1e-3 : 0.5);
        const CholeskyFactor f = cholesky(m);
        CHECK(f.jitter == 0.0);
        const Matrix back = f.lower * f.lower.transpose();
        CHECK(rel_frobenius(back, m.matrix()) < 1e-10);
        // strictly lower triangular part only
        CHECK(f.lower.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("cholesky escalates jitter for singular PSD input") {
    Matrix ones = Matrix::Ones(4, 4);  // rank one
    const CholeskyFactor f = cholesky(SpdMatrix(ones));
    CHECK(f.jitter > 0.0);
    CHECK(f.jitter <= 1e-8 * 1.0000001);
    const Matrix shifted = ones + f.jitter * Matrix::Identity(4, 4);
    CHECK(rel_frobenius(f.lower * f.lower.transpose(), shifted) < 1e-10);
}

TEST_CASE("cholesky reports the attempted jitter when the matrix is indefinite") {
    Matrix m(2, 2);
    m << 1, 0, 0, -1;
    try {
        cholesky(SpdMatrix(m));
        FAIL("expected NotPositiveDefinite");
    } catch (const NotPositiveDefinite& e) {
        CHECK(e.kind() == ErrorKind::not_positive_definite);
        CHECK(e.attempted_jitter() == doctest::Approx(1e-8).epsilon(1e-9));
    }
}

TEST_CASE("zero matrix factors to zero") {
    const CholeskyFactor f = cholesky(SpdMatrix(Matrix::Zero(3, 3)));
    CHECK(f.lower == Matrix::Zero(3, 3));
}

TEST_CASE("SpdMatrix rejects asymmetric and non-square input") {
    Matrix a(2, 2);
    a << 1, 2, 3, 4;
    CHECK_THROWS_AS(SpdMatrix{a}, Error);
    CHECK_THROWS_AS(SpdMatrix{Matrix::Zero(2, 3)}, Error);
}

TEST_CASE("inverse of a Kronecker product is the Kronecker product of inverses") {
    RandomStream rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const SpdMatrix a = random_spd(rng, 3);
        const SpdMatrix b = random_spd(rng, 2);
        const Matrix lhs = spd_inverse(SpdMatrix(kron(a.matrix(), b.matrix())));
        const Matrix rhs = kron(spd_inverse(a), spd_inverse(b));
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("vec helpers") {
    Matrix m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    Vector r(6), c(6);
    r << 1, 2, 3, 4, 5, 6;
    c << 1, 4, 2, 5, 3, 6;
    CHECK(vec_rows(m) == r);
    CHECK(vec_cols(m) == c);
    CHECK(unvec_rows(r, 2, 3) == m);
}

TEST_CASE("matrix normal with zero covariance returns the mean") {
    Matrix mean(3, 2);
    mean << 1, 2, 3, 4, 5, 6;
    const MatrixNormal dist{mean, SpdMatrix(Matrix::Zero(3, 3)), SpdMatrix::identity(2)};
    for (const Matrix& s : sample_matrix_normal(dist, RandomStream(3), 5)) CHECK(s == mean);
}

TEST_CASE("matrix normal standard moments") {
    const MatrixNormal dist{Matrix::Zero(3, 2), SpdMatrix::identity(3), SpdMatrix::identity(2)};
    const std::size_t n = 100000;
    const auto draws = sample_matrix_normal(dist, RandomStream(4), n);
    Matrix sum = Matrix::Zero(3, 2), sum_sq = Matrix::Zero(3, 2);
    for (const Matrix& d : draws) {
        sum += d;
        sum_sq += d.cwiseProduct(d);
    }
    const Matrix mean = sum / static_cast<double>(n);
    const Matrix var = sum_sq / static_cast<double>(n) - mean.cwiseProduct(mean);
    CHECK(mean.cwiseAbs().maxCoeff() < 0.02);
    CHECK(var.minCoeff() > 0.97);
    CHECK(var.maxCoeff() < 1.03);
}

TEST_CASE("matrix normal vec covariance matches the Kronecker product") {
    RandomStream rng(5);
    const SpdMatrix row = random_spd(rng, 3);
    const SpdMatrix col = random_spd(rng, 2);
    Matrix mean(3, 2);
    mean << 1, -1, 0.5, 2, 0, 3;
    const MatrixNormal dist{mean, row, col};
    const std::size_t n = 100000;
    const auto draws = sample_matrix_normal(dist, RandomStream(6), n);
    Matrix by_cols(n, 6), by_rows(n, 6);
    for (std::size_t i = 0; i < n; ++i) {
        by_cols.row(static_cast<Eigen::Index>(i)) = vec_cols(draws[i]).transpose();
        by_rows.row(static_cast<Eigen::Index>(i)) = vec_rows(draws[i]).transpose();
    }
    CHECK(rel_frobenius(empirical_covariance(by_cols), kron(col.matrix(), row.matrix())) < 0.05);
    CHECK(rel_frobenius(empirical_covariance(by_rows), kron(row.matrix(), col.matrix())) < 0.05);
}

TEST_CASE("matrix normal sampling is deterministic across runs and job counts") {
    RandomStream rng(7);
    const MatrixNormal dist{testing::random_matrix(rng, 5, 4), random_spd(rng, 5), random_spd(rng, 4)};
    const auto a = sample_matrix_normal(dist, RandomStream(99), 64, 1);
    const auto b = sample_matrix_normal(dist, RandomStream(99), 64, 1);
    const auto c = sample_matrix_normal(dist, RandomStream(99), 64, 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::memcmp(a[i].data(), b[i].data(), sizeof(double) * 20) == 0);
        CHECK(std::memcmp(a[i].data(), c[i].data(), sizeof(double) * 20) == 0);
    }
    const auto other = sample_matrix_normal(dist, RandomStream(100), 1);
    CHECK(other[0] != a[0]);
}

TEST_CASE("MatrixNormal validates dimensions") {
    const MatrixNormal bad{Matrix::Zero(3, 2), SpdMatrix::identity(2), SpdMatrix::identity(2)};
    CHECK_THROWS_AS(sample_matrix_normal(bad, RandomStream(1), 1), Error);
}

TEST_CASE("GP with zero amplitude is constant") {
    GridGpConfig cfg;
    cfg.width = 12;
    cfg.height = 9;
    cfg.amplitude = 0.0;
    cfg.mean = -3.5;
    for (const Matrix& f : sample_gp_grid(cfg, RandomStream(1), 3)) {
        CHECK(f.rows() == 9);
        CHECK(f.cols() == 12);
        CHECK((f.array() == -3.5).all());
    }
}

TEST_CASE("GP config validation") {
    GridGpConfig cfg;
    cfg.length_scale = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.width = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.amplitude = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("GP correlation at lag equal to the length scale") {
    GridGpConfig cfg;
    cfg.width = 32;
    cfg.height = 32;
    cfg.mean = 0.0;
    cfg.amplitude = 2.0;
    cfg.length_scale = 5.0;
    const auto fields = sample_gp_grid(cfg, RandomStream(8), 4000);
    // Pool over all horizontally lagged pixel pairs.
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (const Matrix& f : fields) {
        for (Eigen::Index y = 0; y < 32; ++y) {
            for (Eigen::Index x = 0; x + 5 < 32; ++x) {
                sxy += f(y, x) * f(y, x + 5);
                sxx += f(y, x) * f(y, x);
                syy += f(y, x + 5) * f(y, x + 5);
            }
        }
    }
    const double corr = sxy / std::sqrt(sxx * syy);
    CHECK(std::fabs(corr - std::exp(-0.5)) < 0.05);
    // marginal variance ≈ amplitude²
    CHECK(sxx / (4000.0 * 32 * 27) == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("separable GP matches dense sampling on a 4x4 grid") {
    GridGpConfig cfg;
    cfg.width = 4;
    cfg.height = 4;
    cfg.mean = 1.0;
    cfg.amplitude = 1.5;
    cfg.length_scale = 1.3;
    const std::size_t n = 100000;

    // Dense 16×16 covariance built pixel-by-pixel, sampled through Eigen's LLT.
    Matrix dense(16, 16);
    for (int a = 0; a < 16; ++a) {
        for (int b = 0; b < 16; ++b) {
            const double dy = a / 4 - b / 4, dx = a % 4 - b % 4;
            dense(a, b) = cfg.amplitude * cfg.amplitude *
                          std::exp(-dx * dx / (2 * cfg.length_scale * cfg.length_scale)) *
                          std::exp(-dy * dy / (2 * cfg.length_scale * cfg.length_scale));
        }
    }
    const Matrix l = Eigen::LLT<Matrix>(dense).matrixL();
    RandomStream rng(9);
    Matrix dense_draws(n, 16);
    for (std::size_t i = 0; i < n; ++i) {
        Vector eps(16);
        for (int j = 0; j < 16; ++j) eps(j) = rng.normal();
        dense_draws.row(static_cast<Eigen::Index>(i)) = (l * eps).transpose().array() + cfg.mean;
    }

    const auto fields = sample_gp_grid(cfg, RandomStream(10), n);
    Matrix sep_draws(n, 16);
    for (std::size_t i = 0; i < n; ++i) sep_draws.row(static_cast<Eigen::Index>(i)) = vec_rows(fields[i]).transpose();

    const Matrix cov_dense = empirical_covariance(dense_draws);
    const Matrix cov_sep = empirical_covariance(sep_draws);
    CHECK(rel_frobenius(cov_sep, cov_dense) < 0.05);
    CHECK(rel_frobenius(cov_sep, dense) < 0.05);
    const double mean_gap = (sep_draws.colwise().mean() - dense_draws.colwise().mean()).cwiseAbs().maxCoeff();
    CHECK(mean_gap < 0.05 * cfg.amplitude);
}

TEST_CASE("GP at the published configuration centres on the constant mean") {
    GridGpConfig cfg;  // 224x224, mean -100, amplitude 100, length 22.4
    const std::size_t n = 2000;
    const GridGpSampler sampler(cfg);
    Matrix sum = Matrix::Zero(224, 224);
    for (std::size_t i = 0; i < n; ++i) {
        RandomStream s = RandomStream(12).child(i);
        sum += sampler.draw(s);
    }
    const Matrix mean = sum / static_cast<double>(n);
    CHECK((mean.array() + 100.0).abs().maxCoeff() < 10.0);
}
