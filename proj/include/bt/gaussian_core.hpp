#pragma once

#include "bt/random.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

namespace bt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Symmetric positive (semi-)definite matrix. Construction checks shape and
/// symmetry (1e-12 relative to the largest entry); definiteness is only known
/// once a factorization has been attempted.
class SpdMatrix {
public:
    SpdMatrix() = default;
    explicit SpdMatrix(Matrix entries);

    static SpdMatrix identity(std::size_t dim);

    std::size_t dim() const noexcept { return static_cast<std::size_t>(entries_.rows()); }
    const Matrix& matrix() const noexcept { return entries_; }

private:
    Matrix entries_;
};

struct JitterPolicy {
    double initial_scale = 1e-10;  // times trace/dim
    double growth = 10.0;
    int max_attempts = 3;
};

struct CholeskyFactor {
    Matrix lower;
    double jitter = 0.0;  // diagonal shift that was actually applied
};

/// Lower-triangular L with L Lᵀ = m + jitter·I. The unjittered matrix is tried
/// first; on failure the diagonal is shifted per `policy`. An all-zero input
/// factors to the zero matrix. Throws NotPositiveDefinite once the policy is
/// exhausted.
CholeskyFactor cholesky(const SpdMatrix& m, const JitterPolicy& policy = {});

/// m⁻¹ via the (possibly jittered) Cholesky factor.
Matrix spd_inverse(const SpdMatrix& m, const JitterPolicy& policy = {});

/// log|m| from a Cholesky factor.
double log_det(const CholeskyFactor& f);

/// Solves (L Lᵀ) x = b.
Vector cholesky_solve(const CholeskyFactor& f, const Vector& b);

Matrix kron(const Matrix& a, const Matrix& b);

/// Stacks the rows of m (row-major vec).
Vector vec_rows(const Matrix& m);
/// Stacks the columns of m (column-major vec).
Vector vec_cols(const Matrix& m);
Matrix unvec_rows(const Vector& v, std::size_t rows, std::size_t cols);

/// MN(mean, row_cov, col_cov): cov(W_ij, W_kl) = row_cov_ik · col_cov_jl.
/// Equivalently cov(vec_cols W) = col_cov ⊗ row_cov and
/// cov(vec_rows W) = row_cov ⊗ col_cov.
struct MatrixNormal {
    Matrix mean;
    SpdMatrix row_cov;
    SpdMatrix col_cov;

    void validate() const;
};

/// Factored form of a MatrixNormal, reusable across draws.
class MatrixNormalSampler {
public:
    explicit MatrixNormalSampler(const MatrixNormal& dist, const JitterPolicy& policy = {});

    /// mean + L_row · Q · L_colᵀ with Q filled row-major from `rng`.
    Matrix draw(RandomStream& rng) const;

    const Matrix& row_factor() const noexcept { return row_factor_.lower; }
    const Matrix& col_factor() const noexcept { return col_factor_.lower; }

private:
    Matrix mean_;
    CholeskyFactor row_factor_;
    CholeskyFactor col_factor_;
};

/// `count` draws; draw i uses rng.child(i), so the output does not depend on
/// `jobs`.
std::vector<Matrix> sample_matrix_normal(const MatrixNormal& dist, const RandomStream& rng,
                                         std::size_t count, std::size_t jobs = 1);

struct GridGpConfig {
    std::size_t width = 224;
    std::size_t height = 224;
    double mean = -100.0;
    double amplitude = 100.0;  // marginal standard deviation
    double length_scale = 22.4;  // pixels
    double jitter = 0.0;

    void validate() const;
};

/// n×n matrix scale·exp(-(i-j)²/(2ℓ²)) on integer grid coordinates.
Matrix rbf_kernel_1d(std::size_t n, double length_scale, double scale);

/// GP on a pixel grid with separable RBF covariance, sampled as a matrix normal
/// whose row (y) and column (x) factors each carry `amplitude`, so the product
/// has marginal variance amplitude².
class GridGpSampler {
public:
    explicit GridGpSampler(const GridGpConfig& cfg, const JitterPolicy& policy = {});

    /// One height×width field.
    Matrix draw(RandomStream& rng) const;

    const GridGpConfig& config() const noexcept { return cfg_; }

private:
    GridGpConfig cfg_;
    MatrixNormalSampler sampler_;
};

std::vector<Matrix> sample_gp_grid(const GridGpConfig& cfg, const RandomStream& rng,
                                   std::size_t count, std::size_t jobs = 1);

}  // namespace bt
