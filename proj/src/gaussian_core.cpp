#include "bt/gaussian_core.hpp"

#include "bt/errors.hpp"
#include "bt/kernels.hpp"
#include "bt/parallel.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

namespace bt {

SpdMatrix::SpdMatrix(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols()) {
        std::ostringstream os;
        os << "SpdMatrix must be square, got " << entries_.rows() << "x" << entries_.cols();
        throw_dimension_mismatch(os.str());
    }
    if (!entries_.allFinite()) {
        throw Error(ErrorKind::invalid_argument, "SpdMatrix has non-finite entries");
    }
    const double scale = entries_.cwiseAbs().maxCoeff();
    const double asym = (entries_ - entries_.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * scale) {
        throw Error(ErrorKind::invalid_argument, "SpdMatrix is not symmetric");
    }
}

SpdMatrix SpdMatrix::identity(std::size_t dim) {
    return SpdMatrix(Matrix::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)));
}

namespace {

// Row-oriented Cholesky–Crout; the inner products are the hot loop.
std::optional<Matrix> try_cholesky(const Matrix& a, double jitter, double pivot_floor) {
    const auto n = static_cast<std::size_t>(a.rows());
    Matrix l = Matrix::Zero(a.rows(), a.cols());
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < n; ++i) {
        double* li = l.data() + i * n;
        for (std::size_t j = 0; j < i; ++j) {
            const double* lj = l.data() + j * n;
            li[j] = (a(i, j) - k.dot(li, lj, j)) / lj[j];
        }
        const double d = a(i, i) + jitter - k.dot(li, li, i);
        if (!(d > pivot_floor)) return std::nullopt;
        li[i] = std::sqrt(d);
    }
    return l;
}

}  // namespace

CholeskyFactor cholesky(const SpdMatrix& m, const JitterPolicy& policy) {
    const Matrix& a = m.matrix();
    const std::size_t n = m.dim();
    if (n == 0) return {};
    const double max_abs = a.cwiseAbs().maxCoeff();
    if (max_abs == 0.0) return {Matrix::Zero(a.rows(), a.cols()), 0.0};

    const double max_diag = a.diagonal().cwiseAbs().maxCoeff();
    const double pivot_floor = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag;
    if (auto l = try_cholesky(a, 0.0, pivot_floor)) return {std::move(*l), 0.0};

    const double base = std::fabs(a.trace()) / static_cast<double>(n);
    double jitter = policy.initial_scale * (base > 0.0 ? base : max_abs);
    for (int attempt = 0; attempt < policy.max_attempts; ++attempt) {
        if (auto l = try_cholesky(a, jitter, pivot_floor)) return {std::move(*l), jitter};
        if (attempt + 1 < policy.max_attempts) jitter *= policy.growth;
    }
    throw NotPositiveDefinite(n, jitter);
}

Matrix spd_inverse(const SpdMatrix& m, const JitterPolicy& policy) {
    const CholeskyFactor f = cholesky(m, policy);
    const auto n = static_cast<Eigen::Index>(m.dim());
    Matrix linv = f.lower.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
    Matrix inv = linv.transpose() * linv;
    return 0.5 * (inv + inv.transpose());
}

double log_det(const CholeskyFactor& f) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < f.lower.rows(); ++i) s += std::log(f.lower(i, i));
    return 2.0 * s;
}

Vector cholesky_solve(const CholeskyFactor& f, const Vector& b) {
    Vector y = f.lower.triangularView<Eigen::Lower>().solve(b);
    return f.lower.transpose().triangularView<Eigen::Upper>().solve(y);
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
        }
    }
    return out;
}

Vector vec_rows(const Matrix& m) {
    Vector v(m.size());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) v(k++) = m(i, j);
    return v;
}

Vector vec_cols(const Matrix& m) {
    Vector v(m.size());
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) v(k++) = m(i, j);
    return v;
}

Matrix unvec_rows(const Vector& v, std::size_t rows, std::size_t cols) {
    if (static_cast<std::size_t>(v.size()) != rows * cols) {
        throw_dimension_mismatch("unvec_rows: vector length does not match shape");
    }
    Matrix m(rows, cols);
    std::copy(v.data(), v.data() + v.size(), m.data());
    return m;
}

void MatrixNormal::validate() const {
    if (static_cast<std::size_t>(mean.rows()) != row_cov.dim() ||
        static_cast<std::size_t>(mean.cols()) != col_cov.dim()) {
        std::ostringstream os;
        os << "MatrixNormal: mean is " << mean.rows() << "x" << mean.cols() << " but row_cov is "
           << row_cov.dim() << " and col_cov is " << col_cov.dim();
        throw_dimension_mismatch(os.str());
    }
}

MatrixNormalSampler::MatrixNormalSampler(const MatrixNormal& dist, const JitterPolicy& policy)
    : mean_(dist.mean) {
    dist.validate();
    row_factor_ = cholesky(dist.row_cov, policy);
    col_factor_ = cholesky(dist.col_cov, policy);
}

Matrix MatrixNormalSampler::draw(RandomStream& rng) const {
    const auto r = static_cast<std::size_t>(mean_.rows());
    const auto c = static_cast<std::size_t>(mean_.cols());
    Matrix q(mean_.rows(), mean_.cols());
    for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();

    const auto& k = kernels::active();
    Matrix left(mean_.rows(), mean_.cols());
    k.trmm_lower(r, c, row_factor_.lower.data(), r, q.data(), c, left.data(), c);
    // (L_row Q) L_colᵀ = (L_col (L_row Q)ᵀ)ᵀ
    Matrix left_t = left.transpose();
    Matrix right_t(mean_.cols(), mean_.rows());
    k.trmm_lower(c, r, col_factor_.lower.data(), c, left_t.data(), r, right_t.data(), r);
    return mean_ + right_t.transpose();
}

std::vector<Matrix> sample_matrix_normal(const MatrixNormal& dist, const RandomStream& rng,
                                         std::size_t count, std::size_t jobs) {
    const MatrixNormalSampler sampler(dist);
    std::vector<Matrix> out(count);
    parallel_for(count, jobs, [&](std::size_t i) {
        RandomStream stream = rng.child(i);
        out[i] = sampler.draw(stream);
    });
    return out;
}

void GridGpConfig::validate() const {
    if (width < 1 || height < 1) {
        throw Error(ErrorKind::invalid_argument, "GridGpConfig: width and height must be >= 1");
    }
    if (!std::isfinite(amplitude) || amplitude < 0.0) {
        throw Error(ErrorKind::invalid_argument, "GridGpConfig: amplitude must be finite and >= 0");
    }
    if (!std::isfinite(length_scale) || !(length_scale > 0.0)) {
        throw Error(ErrorKind::invalid_argument, "GridGpConfig: length_scale must be finite and > 0");
    }
    if (!std::isfinite(mean) || !(jitter >= 0.0)) {
        throw Error(ErrorKind::invalid_argument, "GridGpConfig: mean must be finite, jitter >= 0");
    }
}

Matrix rbf_kernel_1d(std::size_t n, double length_scale, double scale) {
    Matrix k(n, n);
    const double inv = 1.0 / (2.0 * length_scale * length_scale);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double d = static_cast<double>(i) - static_cast<double>(j);
            k(i, j) = scale * std::exp(-d * d * inv);
        }
    }
    return k;
}

namespace {

MatrixNormal grid_distribution(const GridGpConfig& cfg) {
    cfg.validate();
    const auto h = static_cast<Eigen::Index>(cfg.height);
    const auto w = static_cast<Eigen::Index>(cfg.width);
    Matrix rows = rbf_kernel_1d(cfg.height, cfg.length_scale, cfg.amplitude);
    Matrix cols = rbf_kernel_1d(cfg.width, cfg.length_scale, cfg.amplitude);
    if (cfg.amplitude > 0.0 && cfg.jitter > 0.0) {
        rows.diagonal().array() += cfg.jitter;
        cols.diagonal().array() += cfg.jitter;
    }
    return MatrixNormal{Matrix::Constant(h, w, cfg.mean), SpdMatrix(std::move(rows)),
                        SpdMatrix(std::move(cols))};
}

}  // namespace

GridGpSampler::GridGpSampler(const GridGpConfig& cfg, const JitterPolicy& policy)
    : cfg_(cfg), sampler_(grid_distribution(cfg), policy) {}

Matrix GridGpSampler::draw(RandomStream& rng) const { return sampler_.draw(rng); }

std::vector<Matrix> sample_gp_grid(const GridGpConfig& cfg, const RandomStream& rng,
                                   std::size_t count, std::size_t jobs) {
    const GridGpSampler sampler(cfg);
    std::vector<Matrix> out(count);
    parallel_for(count, jobs, [&](std::size_t i) {
        RandomStream stream = rng.child(i);
        out[i] = sampler.draw(stream);
    });
    return out;
}

}  // namespace bt
