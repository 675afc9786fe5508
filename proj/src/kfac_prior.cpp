#include "bt/kfac_prior.hpp"

#include "bt/errors.hpp"
#include "bt/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bt {

namespace {

constexpr std::size_t kChunk = 32;

bool canonical_less(const LabeledFeature& a, const LabeledFeature& b) {
    if (a.id != b.id) return a.id < b.id;
    if (a.y != b.y) return a.y < b.y;
    return std::lexicographical_compare(a.x.data(), a.x.data() + a.x.size(), b.x.data(),
                                        b.x.data() + b.x.size());
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

KfacExpectations kfac_expectations(const HeadWeights& head, std::span<const LabeledFeature> data,
                                   std::size_t jobs) {
    if (data.empty()) throw Error(ErrorKind::empty_dataset, "KFAC needs a nonempty dataset");
    const auto f = head.features();
    for (const auto& d : data) {
        if (static_cast<std::size_t>(d.x.size()) != f) throw_dimension_mismatch("KFAC: feature length mismatch");
    }

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return canonical_less(data[a], data[b]); });

    const auto d = static_cast<Eigen::Index>(head.columns());
    const auto k = static_cast<Eigen::Index>(head.classes());
    const std::size_t chunks = (data.size() + kChunk - 1) / kChunk;
    std::vector<Matrix> z_parts(chunks);
    std::vector<Matrix> a_parts(chunks);

    parallel_for(chunks, jobs, [&](std::size_t c) {
        const std::size_t begin = c * kChunk;
        const std::size_t end = std::min(data.size(), begin + kChunk);
        Matrix x(static_cast<Eigen::Index>(end - begin), d);
        Matrix a = Matrix::Zero(k, k);
        for (std::size_t i = begin; i < end; ++i) {
            const Vector xt = augment_bias(data[order[i]].x);
            x.row(static_cast<Eigen::Index>(i - begin)) = xt.transpose();
            const Vector p = softmax_probs(head, data[order[i]].x);
            a.diagonal() += p;
            a.noalias() -= p * p.transpose();
        }
        z_parts[c] = x.transpose() * x;
        a_parts[c] = std::move(a);
    });

    Matrix z_sum = Matrix::Zero(d, d);
    Matrix a_sum = Matrix::Zero(k, k);
    for (std::size_t c = 0; c < chunks; ++c) {
        z_sum += z_parts[c];
        a_sum += a_parts[c];
    }
    const double n = static_cast<double>(data.size());
    return {symmetrize(z_sum / n), symmetrize(a_sum / n)};
}

KfacFactors compute_kfac(const HeadWeights& head, std::span<const LabeledFeature> data, double tau,
                         std::size_t jobs) {
    if (!(tau >= 0.0) || !std::isfinite(tau)) {
        throw Error(ErrorKind::invalid_argument, "tau must be finite and >= 0");
    }
    const KfacExpectations e = kfac_expectations(head, data, jobs);
    const double root_n = std::sqrt(static_cast<double>(data.size()));
    const double root_tau = std::sqrt(tau);
    Matrix u = root_n * e.feature_second_moment;
    Matrix v = root_n * e.class_curvature;
    u.diagonal().array() += root_tau;
    v.diagonal().array() += root_tau;
    return KfacFactors{SpdMatrix(std::move(u)), SpdMatrix(std::move(v)), data.size(), tau};
}

BuiltPrior build_prior(const HeadWeights& head, const KfacFactors& factors) {
    NormalPrior prior = NormalPrior::kronecker(head, factors.feature_factor, factors.class_factor);
    MatrixNormal mn{head.w, SpdMatrix(spd_inverse(factors.class_factor)),
                    SpdMatrix(spd_inverse(factors.feature_factor))};
    return BuiltPrior{std::move(prior), std::move(mn)};
}

namespace {

// Rank of `label` among the probabilities; ties resolved towards lower index.
std::size_t rank_of(const Vector& probs, std::size_t label) {
    const double pl = probs(static_cast<Eigen::Index>(label));
    std::size_t rank = 0;
    for (Eigen::Index c = 0; c < probs.size(); ++c) {
        const double pc = probs(c);
        if (pc > pl || (pc == pl && static_cast<std::size_t>(c) < label)) ++rank;
    }
    return rank;
}

HeadValidation rates(const std::vector<Vector>& predictive, std::span<const LabeledFeature> eval,
                     std::size_t k) {
    HeadValidation out;
    out.k = k;
    std::size_t top1 = 0;
    std::size_t topk = 0;
    for (std::size_t i = 0; i < eval.size(); ++i) {
        const std::size_t r = rank_of(predictive[i], eval[i].y);
        if (r == 0) ++top1;
        if (r < k) ++topk;
    }
    out.top1 = static_cast<double>(top1) / static_cast<double>(eval.size());
    out.topk = static_cast<double>(topk) / static_cast<double>(eval.size());
    return out;
}

}  // namespace

HeadValidation validate_head(const NormalPrior& prior, std::span<const LabeledFeature> eval,
                             std::size_t samples, RandomStream& rng, std::size_t k) {
    if (eval.empty()) throw Error(ErrorKind::empty_dataset, "validate_head needs evaluation examples");
    if (samples == 0) throw Error(ErrorKind::invalid_argument, "validate_head needs samples >= 1");
    const PriorSampler sampler(prior);
    const auto classes = static_cast<Eigen::Index>(prior.mean().classes());
    std::vector<Vector> predictive(eval.size(), Vector::Zero(classes));
    for (std::size_t s = 0; s < samples; ++s) {
        const HeadWeights w = sampler.draw(rng);
        for (std::size_t i = 0; i < eval.size(); ++i) predictive[i] += softmax_probs(w, eval[i].x);
    }
    for (auto& p : predictive) p /= static_cast<double>(samples);
    return rates(predictive, eval, std::min<std::size_t>(k, prior.mean().classes()));
}

HeadValidation deterministic_accuracy(const HeadWeights& head, std::span<const LabeledFeature> eval,
                                      std::size_t k) {
    if (eval.empty()) throw Error(ErrorKind::empty_dataset, "accuracy needs evaluation examples");
    std::vector<Vector> probs;
    probs.reserve(eval.size());
    for (const auto& e : eval) probs.push_back(softmax_probs(head, e.x));
    return rates(probs, eval, std::min<std::size_t>(k, head.classes()));
}

HeadWeights train_head(std::span<const LabeledFeature> data, std::size_t classes,
                       double weak_precision, const FitConfig& cfg) {
    if (data.empty()) throw Error(ErrorKind::empty_dataset, "train_head needs training examples");
    const auto features = static_cast<std::size_t>(data.front().x.size());
    const NormalPrior prior =
        NormalPrior::isotropic(HeadWeights::zeros(classes, features), weak_precision);
    return fit_map(data, prior, cfg);
}

}  // namespace bt
