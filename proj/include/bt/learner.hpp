#pragma once

#include "bt/gaussian_core.hpp"
#include "bt/random.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace bt {

/// Softmax head weights, classes × (features + 1). The last column is the bias.
struct HeadWeights {
    Matrix w;

    HeadWeights() = default;
    explicit HeadWeights(Matrix m) : w(std::move(m)) {}
    static HeadWeights zeros(std::size_t classes, std::size_t features);

    std::size_t classes() const noexcept { return static_cast<std::size_t>(w.rows()); }
    std::size_t features() const noexcept { return static_cast<std::size_t>(w.cols()) - 1; }
    std::size_t columns() const noexcept { return static_cast<std::size_t>(w.cols()); }
    std::size_t vec_size() const noexcept { return static_cast<std::size_t>(w.size()); }
};

struct LabeledFeature {
    std::uint32_t id = 0;
    Vector x;       // F raw features, no bias
    std::size_t y = 0;
};

/// x with a trailing 1.
Vector augment_bias(const Vector& x);

/// Class probabilities softmax(W x̃).
Vector softmax_probs(const HeadWeights& head, const Vector& x);

/// Gaussian prior over vec_rows(W). The precision is either a dense matrix over
/// the K·(F+1) vec coordinates or a Kronecker product class ⊗ feature.
class NormalPrior {
public:
    struct Dense {
        SpdMatrix precision;
    };
    struct Kronecker {
        SpdMatrix feature;  // (F+1)×(F+1)
        SpdMatrix cls;      // K×K
    };

    static NormalPrior dense(HeadWeights mean, SpdMatrix precision);
    static NormalPrior kronecker(HeadWeights mean, SpdMatrix feature_precision, SpdMatrix class_precision);
    static NormalPrior isotropic(HeadWeights mean, double precision);

    const HeadWeights& mean() const noexcept { return mean_; }
    bool is_kronecker() const noexcept { return kron_.has_value(); }
    const Kronecker& kronecker_factors() const;

    /// Dense precision over vec_rows coordinates.
    Matrix dense_precision() const;
    /// Dense covariance over vec_rows coordinates.
    Matrix dense_covariance() const;
    double log_det_precision() const noexcept { return log_det_precision_; }

    /// Precision applied to a K×(F+1) displacement, reshaped back.
    Matrix apply_precision(const Matrix& delta) const;

private:
    NormalPrior() = default;

    HeadWeights mean_;
    std::optional<Dense> dense_;
    std::optional<Kronecker> kron_;
    double log_det_precision_ = 0.0;
};

/// Draws weight matrices from a NormalPrior.
class PriorSampler {
public:
    explicit PriorSampler(const NormalPrior& prior);
    HeadWeights draw(RandomStream& rng) const;

private:
    HeadWeights mean_;
    std::optional<MatrixNormalSampler> matrix_normal_;
    CholeskyFactor dense_factor_;
};

struct Objective {
    double loss = 0.0;
    Matrix gradient;   // K×(F+1)
    Matrix hessian;    // dense, vec_rows coordinates
};

/// Negative log posterior: softmax NLL plus the negative log normal density of
/// the prior, with gradient and Hessian.
Objective objective(const HeadWeights& weights, std::span<const LabeledFeature> data,
                    const NormalPrior& prior);

/// Loss and gradient only.
std::pair<double, Matrix> loss_and_gradient(const HeadWeights& weights,
                                            std::span<const LabeledFeature> data,
                                            const NormalPrior& prior);

/// Σ_i (diag(p_i) − p_i p_iᵀ) ⊗ x̃_i x̃_iᵀ, no prior term.
Matrix likelihood_hessian(const HeadWeights& weights, std::span<const LabeledFeature> data);

struct FitConfig {
    double grad_tol = 1e-8;
    int max_iter = 500;
    /// Gaussian feature noise standing in for data augmentation; 0 disables.
    double feature_jitter_std = 0.0;
    std::size_t jitter_copies = 4;
    std::uint64_t jitter_seed = 0;
};

/// Jittered copies of `data` (used when cfg.feature_jitter_std > 0).
std::vector<LabeledFeature> augment_with_jitter(std::span<const LabeledFeature> data,
                                                const FitConfig& cfg);

/// MAP weights by damped Newton iterations started at the prior mean.
HeadWeights fit_map(std::span<const LabeledFeature> data, const NormalPrior& prior,
                    const FitConfig& cfg = {});

class LearnerPosterior {
public:
    LearnerPosterior(HeadWeights mode, SpdMatrix covariance);

    const HeadWeights& mode() const noexcept { return mode_; }
    const SpdMatrix& covariance() const noexcept { return covariance_; }

    HeadWeights draw(RandomStream& rng) const;

private:
    HeadWeights mode_;
    SpdMatrix covariance_;
    CholeskyFactor factor_;
};

LearnerPosterior laplace_posterior(std::span<const LabeledFeature> data, const NormalPrior& prior,
                                   const FitConfig& cfg = {});

struct PredictiveEstimate {
    double mean = 0.0;
    double std_error = 0.0;
};

/// Monte Carlo posterior predictive P(Y=c | x, D) from `samples` weight draws.
double posterior_predictive(const LearnerPosterior& post, const Vector& x, std::size_t c,
                            std::size_t samples, RandomStream& rng);
PredictiveEstimate posterior_predictive_stats(const LearnerPosterior& post, const Vector& x,
                                              std::size_t c, std::size_t samples, RandomStream& rng);
/// All classes from the same draws; sums to one.
Vector posterior_predictive_all(const LearnerPosterior& post, const Vector& x, std::size_t samples,
                                RandomStream& rng);

/// Two-class prior for (target, alternative): the rows of the mean, and the
/// marginal of the matrix normal over those rows, densified. Throws
/// InvalidClassPair.
NormalPrior slice_prior(const NormalPrior& full, std::size_t target, std::size_t alternative);

}  // namespace bt
