#include "bt/learner.hpp"

#include "bt/errors.hpp"
#include "bt/kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

namespace bt {

HeadWeights HeadWeights::zeros(std::size_t classes, std::size_t features) {
    return HeadWeights(Matrix::Zero(static_cast<Eigen::Index>(classes),
                                    static_cast<Eigen::Index>(features + 1)));
}

Vector augment_bias(const Vector& x) {
    Vector out(x.size() + 1);
    out.head(x.size()) = x;
    out(x.size()) = 1.0;
    return out;
}

namespace {

// Numerically stable softmax of a logit vector.
Vector softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    Vector e = (logits.array() - m).exp().matrix();
    return e / e.sum();
}

double log_sum_exp(const Vector& logits) {
    const double m = logits.maxCoeff();
    return m + std::log((logits.array() - m).exp().sum());
}

void check_data(const HeadWeights& w, std::span<const LabeledFeature> data) {
    for (const auto& d : data) {
        if (static_cast<std::size_t>(d.x.size()) != w.features()) {
            std::ostringstream os;
            os << "example " << d.id << " has " << d.x.size() << " features, head expects "
               << w.features();
            throw_dimension_mismatch(os.str());
        }
        if (d.y >= w.classes()) {
            std::ostringstream os;
            os << "example " << d.id << " has label " << d.y << " but head has " << w.classes()
               << " classes";
            throw_dimension_mismatch(os.str());
        }
    }
}

void check_prior(const HeadWeights& w, const NormalPrior& prior) {
    if (prior.mean().w.rows() != w.w.rows() || prior.mean().w.cols() != w.w.cols()) {
        throw_dimension_mismatch("weights and prior mean have different shapes");
    }
}

Matrix design_matrix(std::span<const LabeledFeature> data, std::size_t features) {
    Matrix x(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(features + 1));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x.row(r).head(static_cast<Eigen::Index>(features)) = data[i].x.transpose();
        x(r, static_cast<Eigen::Index>(features)) = 1.0;
    }
    return x;
}

struct LikelihoodTerms {
    double loss = 0.0;
    Matrix gradient;
};

LikelihoodTerms likelihood_terms(const HeadWeights& weights, std::span<const LabeledFeature> data) {
    LikelihoodTerms out{0.0, Matrix::Zero(weights.w.rows(), weights.w.cols())};
    for (const auto& d : data) {
        const Vector xt = augment_bias(d.x);
        const Vector logits = weights.w * xt;
        const double lse = log_sum_exp(logits);
        out.loss += lse - logits(static_cast<Eigen::Index>(d.y));
        Vector residual = (logits.array() - lse).exp().matrix();
        residual(static_cast<Eigen::Index>(d.y)) -= 1.0;
        out.gradient.noalias() += residual * xt.transpose();
    }
    return out;
}

double prior_constant(const NormalPrior& prior) {
    const double dim = static_cast<double>(prior.mean().vec_size());
    return 0.5 * dim * std::log(2.0 * std::numbers::pi) - 0.5 * prior.log_det_precision();
}

}  // namespace

Vector softmax_probs(const HeadWeights& head, const Vector& x) {
    return softmax(head.w * augment_bias(x));
}

// ---------------------------------------------------------------------------
// NormalPrior

NormalPrior NormalPrior::dense(HeadWeights mean, SpdMatrix precision) {
    if (precision.dim() != mean.vec_size()) {
        throw_dimension_mismatch("dense prior precision does not match the mean's vec size");
    }
    NormalPrior p;
    p.log_det_precision_ = log_det(cholesky(precision));
    p.mean_ = std::move(mean);
    p.dense_ = Dense{std::move(precision)};
    return p;
}

NormalPrior NormalPrior::kronecker(HeadWeights mean, SpdMatrix feature_precision,
                                   SpdMatrix class_precision) {
    if (feature_precision.dim() != mean.columns() || class_precision.dim() != mean.classes()) {
        throw_dimension_mismatch("Kronecker prior factors do not match the mean's shape");
    }
    NormalPrior p;
    const double k = static_cast<double>(mean.classes());
    const double d = static_cast<double>(mean.columns());
    p.log_det_precision_ =
        d * log_det(cholesky(class_precision)) + k * log_det(cholesky(feature_precision));
    p.mean_ = std::move(mean);
    p.kron_ = Kronecker{std::move(feature_precision), std::move(class_precision)};
    return p;
}

NormalPrior NormalPrior::isotropic(HeadWeights mean, double precision) {
    if (!(precision > 0.0) || !std::isfinite(precision)) {
        throw Error(ErrorKind::invalid_argument, "isotropic prior precision must be positive");
    }
    const auto n = static_cast<Eigen::Index>(mean.vec_size());
    NormalPrior p;
    p.log_det_precision_ = static_cast<double>(n) * std::log(precision);
    p.mean_ = std::move(mean);
    p.dense_ = Dense{SpdMatrix(Matrix::Identity(n, n) * precision)};
    return p;
}

const NormalPrior::Kronecker& NormalPrior::kronecker_factors() const {
    if (!kron_) throw Error(ErrorKind::invalid_argument, "prior has a dense precision");
    return *kron_;
}

Matrix NormalPrior::dense_precision() const {
    if (dense_) return dense_->precision.matrix();
    return kron(kron_->cls.matrix(), kron_->feature.matrix());
}

Matrix NormalPrior::dense_covariance() const {
    if (dense_) return spd_inverse(dense_->precision);
    return kron(spd_inverse(kron_->cls), spd_inverse(kron_->feature));
}

Matrix NormalPrior::apply_precision(const Matrix& delta) const {
    if (kron_) {
        // (C ⊗ F) vec_rows(Δ) = vec_rows(C Δ Fᵀ), F symmetric
        return kron_->cls.matrix() * delta * kron_->feature.matrix();
    }
    const Vector v = dense_->precision.matrix() * vec_rows(delta);
    return unvec_rows(v, static_cast<std::size_t>(delta.rows()), static_cast<std::size_t>(delta.cols()));
}

PriorSampler::PriorSampler(const NormalPrior& prior) : mean_(prior.mean()) {
    if (prior.is_kronecker()) {
        const auto& f = prior.kronecker_factors();
        matrix_normal_.emplace(MatrixNormal{prior.mean().w, SpdMatrix(spd_inverse(f.cls)),
                                            SpdMatrix(spd_inverse(f.feature))});
    } else {
        dense_factor_ = cholesky(SpdMatrix(prior.dense_covariance()));
    }
}

namespace {

// mode + unvec(L ε), ε standard normal drawn in vec order.
Matrix draw_dense(const Matrix& mode, const Matrix& lower, RandomStream& rng) {
    const auto n = static_cast<std::size_t>(mode.size());
    Vector eps(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) eps(static_cast<Eigen::Index>(i)) = rng.normal();
    Matrix out = mode;
    if (lower.size() == 0) return out;
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i] += k.dot(lower.data() + i * n, eps.data(), i + 1);
    }
    return out;
}

}  // namespace

HeadWeights PriorSampler::draw(RandomStream& rng) const {
    if (matrix_normal_) return HeadWeights(matrix_normal_->draw(rng));
    return HeadWeights(draw_dense(mean_.w, dense_factor_.lower, rng));
}

// ---------------------------------------------------------------------------
// Objective

Matrix likelihood_hessian(const HeadWeights& weights, std::span<const LabeledFeature> data) {
    check_data(weights, data);
    const auto k = static_cast<Eigen::Index>(weights.classes());
    const auto d = static_cast<Eigen::Index>(weights.columns());
    Matrix h = Matrix::Zero(k * d, k * d);
    if (data.empty()) return h;

    const Matrix x = design_matrix(data, weights.features());
    Matrix probs(x.rows(), k);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        probs.row(i) = softmax(weights.w * x.row(i).transpose()).transpose();
    }
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = a; b < k; ++b) {
            Vector coeff = -probs.col(a).cwiseProduct(probs.col(b));
            if (a == b) coeff += probs.col(a);
            const Matrix weighted = x.array().colwise() * coeff.array();
            Matrix block = weighted.transpose() * x;
            block = 0.5 * (block + block.transpose()).eval();
            h.block(a * d, b * d, d, d) = block;
            if (a != b) h.block(b * d, a * d, d, d) = block;
        }
    }
    return h;
}

std::pair<double, Matrix> loss_and_gradient(const HeadWeights& weights,
                                            std::span<const LabeledFeature> data,
                                            const NormalPrior& prior) {
    check_prior(weights, prior);
    check_data(weights, data);
    LikelihoodTerms lik = likelihood_terms(weights, data);
    const Matrix delta = weights.w - prior.mean().w;
    const Matrix pd = prior.apply_precision(delta);
    const double quad = delta.cwiseProduct(pd).sum();
    return {lik.loss + 0.5 * quad + prior_constant(prior), lik.gradient + pd};
}

Objective objective(const HeadWeights& weights, std::span<const LabeledFeature> data,
                    const NormalPrior& prior) {
    auto [loss, grad] = loss_and_gradient(weights, data, prior);
    Matrix h = likelihood_hessian(weights, data);
    h += prior.dense_precision();
    return Objective{loss, std::move(grad), std::move(h)};
}

// ---------------------------------------------------------------------------
// Fitting

std::vector<LabeledFeature> augment_with_jitter(std::span<const LabeledFeature> data,
                                                const FitConfig& cfg) {
    std::vector<LabeledFeature> out(data.begin(), data.end());
    if (!(cfg.feature_jitter_std > 0.0)) return out;
    RandomStream rng(cfg.jitter_seed, 0x6a17);
    for (std::size_t c = 0; c < cfg.jitter_copies; ++c) {
        for (const auto& d : data) {
            LabeledFeature copy = d;
            for (Eigen::Index j = 0; j < copy.x.size(); ++j) copy.x(j) += cfg.feature_jitter_std * rng.normal();
            out.push_back(std::move(copy));
        }
    }
    return out;
}

namespace {

Vector newton_direction(const Matrix& hessian, const Vector& g) {
    Eigen::LLT<Matrix> llt(hessian);
    if (llt.info() == Eigen::Success) return -llt.solve(g);
    return -cholesky_solve(cholesky(SpdMatrix(0.5 * (hessian + hessian.transpose()))), g);
}

}  // namespace

HeadWeights fit_map(std::span<const LabeledFeature> data_in, const NormalPrior& prior,
                    const FitConfig& cfg) {
    std::vector<LabeledFeature> augmented;
    std::span<const LabeledFeature> data = data_in;
    if (cfg.feature_jitter_std > 0.0) {
        augmented = augment_with_jitter(data_in, cfg);
        data = augmented;
    }

    HeadWeights w = prior.mean();
    check_data(w, data);
    const auto rows = static_cast<std::size_t>(w.w.rows());
    const auto cols = static_cast<std::size_t>(w.w.cols());

    double gnorm = 0.0;
    for (int it = 0; it < cfg.max_iter; ++it) {
        Objective obj = objective(w, data, prior);
        gnorm = obj.gradient.cwiseAbs().maxCoeff();
        if (gnorm < cfg.grad_tol) return w;

        const Vector g = vec_rows(obj.gradient);
        const Vector step = newton_direction(obj.hessian, g);
        const double slope = g.dot(step);

        double t = 1.0;
        bool accepted = false;
        HeadWeights trial;
        for (int ls = 0; ls < 60; ++ls) {
            trial = HeadWeights(w.w + t * unvec_rows(step, rows, cols));
            auto [loss, grad] = loss_and_gradient(trial, data, prior);
            // Near the optimum the loss stops resolving decreases; a smaller
            // gradient is then an acceptable reason to take the step.
            if (loss <= obj.loss + 1e-4 * t * slope || grad.cwiseAbs().maxCoeff() < gnorm) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) throw NonConvergence(it + 1, gnorm);
        w = std::move(trial);
    }
    const auto [loss, grad] = loss_and_gradient(w, data, prior);
    gnorm = grad.cwiseAbs().maxCoeff();
    if (gnorm < cfg.grad_tol) return w;
    throw NonConvergence(cfg.max_iter, gnorm);
}

// ---------------------------------------------------------------------------
// Posterior

LearnerPosterior::LearnerPosterior(HeadWeights mode, SpdMatrix covariance)
    : mode_(std::move(mode)), covariance_(std::move(covariance)) {
    if (covariance_.dim() != mode_.vec_size()) {
        throw_dimension_mismatch("posterior covariance does not match the mode's vec size");
    }
    factor_ = cholesky(covariance_);
}

HeadWeights LearnerPosterior::draw(RandomStream& rng) const {
    return HeadWeights(draw_dense(mode_.w, factor_.lower, rng));
}

LearnerPosterior laplace_posterior(std::span<const LabeledFeature> data, const NormalPrior& prior,
                                   const FitConfig& cfg) {
    HeadWeights mode = fit_map(data, prior, cfg);
    Matrix h = likelihood_hessian(mode, data);
    h += prior.dense_precision();
    return LearnerPosterior(std::move(mode), SpdMatrix(spd_inverse(SpdMatrix(std::move(h)))));
}

PredictiveEstimate posterior_predictive_stats(const LearnerPosterior& post, const Vector& x,
                                              std::size_t c, std::size_t samples, RandomStream& rng) {
    if (samples == 0) throw Error(ErrorKind::invalid_argument, "posterior_predictive needs s >= 1");
    if (static_cast<std::size_t>(x.size()) != post.mode().features()) {
        throw_dimension_mismatch("posterior_predictive: feature vector has wrong length");
    }
    if (c >= post.mode().classes()) throw_dimension_mismatch("posterior_predictive: class out of range");
    const Vector xt = augment_bias(x);
    double sum = 0.0;
    double sum_sq = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        const HeadWeights w = post.draw(rng);
        const double p = softmax(w.w * xt)(static_cast<Eigen::Index>(c));
        sum += p;
        sum_sq += p * p;
    }
    const double n = static_cast<double>(samples);
    const double mean = sum / n;
    const double var = samples > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
    return {mean, std::sqrt(var / n)};
}

double posterior_predictive(const LearnerPosterior& post, const Vector& x, std::size_t c,
                            std::size_t samples, RandomStream& rng) {
    return posterior_predictive_stats(post, x, c, samples, rng).mean;
}

Vector posterior_predictive_all(const LearnerPosterior& post, const Vector& x, std::size_t samples,
                                RandomStream& rng) {
    if (samples == 0) throw Error(ErrorKind::invalid_argument, "posterior_predictive needs s >= 1");
    if (static_cast<std::size_t>(x.size()) != post.mode().features()) {
        throw_dimension_mismatch("posterior_predictive: feature vector has wrong length");
    }
    const Vector xt = augment_bias(x);
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(post.mode().classes()));
    for (std::size_t s = 0; s < samples; ++s) acc += softmax(post.draw(rng).w * xt);
    acc /= static_cast<double>(samples);
    return acc;
}

// ---------------------------------------------------------------------------
// Slicing

NormalPrior slice_prior(const NormalPrior& full, std::size_t target, std::size_t alternative) {
    const std::size_t k = full.mean().classes();
    if (target == alternative || target >= k || alternative >= k) {
        std::ostringstream os;
        os << "invalid class pair (" << target << ", " << alternative << ") for " << k << " classes";
        throw Error(ErrorKind::invalid_class_pair, os.str());
    }
    const auto d = static_cast<Eigen::Index>(full.mean().columns());
    const std::array<Eigen::Index, 2> idx{static_cast<Eigen::Index>(target),
                                          static_cast<Eigen::Index>(alternative)};

    Matrix mean(2, d);
    for (int r = 0; r < 2; ++r) mean.row(r) = full.mean().w.row(idx[static_cast<std::size_t>(r)]);

    if (full.is_kronecker()) {
        const auto& f = full.kronecker_factors();
        const Matrix class_cov = spd_inverse(f.cls);
        Matrix sub(2, 2);
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                sub(a, b) = class_cov(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
        const Matrix sub_precision = spd_inverse(SpdMatrix(sub));
        return NormalPrior::dense(HeadWeights(std::move(mean)),
                                  SpdMatrix(kron(sub_precision, f.feature.matrix())));
    }

    const Matrix cov = full.dense_covariance();
    Matrix sub(2 * d, 2 * d);
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            sub.block(a * d, b * d, d, d) =
                cov.block(idx[static_cast<std::size_t>(a)] * d, idx[static_cast<std::size_t>(b)] * d, d, d);
    return NormalPrior::dense(HeadWeights(std::move(mean)), SpdMatrix(spd_inverse(SpdMatrix(sub))));
}

}  // namespace bt
