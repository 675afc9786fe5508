#pragma once

#include "bt/gaussian_core.hpp"
#include "bt/learner.hpp"

#include <span>

namespace bt {

/// Kronecker factors of the softmax-head curvature.
///   feature_factor = √n·E[z zᵀ] + √τ·I   ((F+1)×(F+1), z bias-augmented)
///   class_factor   = √n·E[diag(p) − p pᵀ] + √τ·I   (K×K, p at the head)
/// so that n·E[Z]⊗E[A] + τI ≈ class_factor ⊗ feature_factor in vec_rows order.
struct KfacFactors {
    SpdMatrix feature_factor;
    SpdMatrix class_factor;
    std::size_t n = 0;
    double tau = 0.0;
};

/// Mean feature outer product and mean softmax curvature, unscaled.
struct KfacExpectations {
    Matrix feature_second_moment;  // E[Z]
    Matrix class_curvature;        // E[A]
};

/// Accumulates E[Z] and E[A]. The data are put in a canonical order first and
/// summed in fixed-size chunks with a fixed reduction tree, so the result is
/// independent of input order and of `jobs`.
KfacExpectations kfac_expectations(const HeadWeights& head, std::span<const LabeledFeature> data,
                                   std::size_t jobs = 1);

/// Throws EmptyDataset on empty data.
KfacFactors compute_kfac(const HeadWeights& head, std::span<const LabeledFeature> data,
                         double tau = 0.0, std::size_t jobs = 1);

struct BuiltPrior {
    NormalPrior prior;           // Kronecker precision (feature_factor, class_factor)
    MatrixNormal matrix_normal;  // MN(head, class_factor⁻¹, feature_factor⁻¹)
};

BuiltPrior build_prior(const HeadWeights& head, const KfacFactors& factors);

struct HeadValidation {
    double top1 = 0.0;
    double topk = 0.0;
    std::size_t k = 5;
};

/// Accuracy of the Monte Carlo predictive (mean softmax over `samples` draws
/// from `prior`) on `eval`. top-k uses min(k, K).
HeadValidation validate_head(const NormalPrior& prior, std::span<const LabeledFeature> eval,
                             std::size_t samples, RandomStream& rng, std::size_t k = 5);

/// Same rates for the deterministic head.
HeadValidation deterministic_accuracy(const HeadWeights& head, std::span<const LabeledFeature> eval,
                                      std::size_t k = 5);

/// Desk-scale stand-in for training the full classifier head: MAP fit under a
/// weak isotropic prior (mean 0, precision `weak_precision`).
HeadWeights train_head(std::span<const LabeledFeature> data, std::size_t classes,
                       double weak_precision = 1e-4, const FitConfig& cfg = {});

}  // namespace bt
