#include "bt/errors.hpp"
#include "bt/learner.hpp"

#include "doctest.h"
#include "test_support.hpp"

#include <cmath>
#include <numbers>

using namespace bt;
using bt::testing::random_data;
using bt::testing::random_matrix;
using bt::testing::random_spd;
using bt::testing::rel_frobenius;
using bt::testing::fd_gradient;
using bt::testing::fd_hessian_from_loss;
using bt::testing::loss_at;
using bt::testing::random_prior;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Central difference of the analytic gradient.
Matrix fd_hessian(const Matrix& w, std::span<const LabeledFeature> data, const NormalPrior& prior,
                  double h) {
    const Vector v = vec_rows(w);
    Matrix hess(v.size(), v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        Vector up = v, dn = v;
        up(i) += h;
        dn(i) -= h;
        const Vector gu = vec_rows(loss_and_gradient(HeadWeights(unvec_rows(up, w.rows(), w.cols())), data, prior).second);
        const Vector gd = vec_rows(loss_and_gradient(HeadWeights(unvec_rows(dn, w.rows(), w.cols())), data, prior).second);
        hess.col(i) = (gu - gd) / (2 * h);
    }
    return hess;
}

// Coarse-to-fine exhaustive grid over all weights; the objective is convex.
Matrix grid_search_minimum(std::span<const LabeledFeature> data, const NormalPrior& prior) {
    const Matrix start = prior.mean().w;
    Vector centre = vec_rows(start);
    const auto n = centre.size();
    double step = 2.0;
    std::vector<int> idx(static_cast<std::size_t>(n));
    while (step > 1e-7) {
        Vector best = centre;
        double best_loss = loss_at(unvec_rows(centre, start.rows(), start.cols()), data, prior);
        std::fill(idx.begin(), idx.end(), -2);
        for (;;) {
            Vector p = centre;
            for (Eigen::Index i = 0; i < n; ++i) p(i) += step * idx[static_cast<std::size_t>(i)];
            const double l = loss_at(unvec_rows(p, start.rows(), start.cols()), data, prior);
            if (l < best_loss) {
                best_loss = l;
                best = p;
            }
            std::size_t d = 0;
            while (d < idx.size() && ++idx[d] > 2) idx[d++] = -2;
            if (d == idx.size()) break;
        }
        if (best == centre) step *= 0.5;
        centre = best;
    }
    return unvec_rows(centre, start.rows(), start.cols());
}

}  // namespace

TEST_CASE("prior-only loss is the normal normalising constant") {
    const NormalPrior prior = NormalPrior::isotropic(HeadWeights::zeros(1, 1), 1.0);
    const double loss = loss_at(Matrix::Zero(1, 2), {}, prior);
    CHECK(loss == doctest::Approx(kLog2Pi).epsilon(1e-14));
    CHECK(loss == doctest::Approx(1.8379).epsilon(1e-4));
}

TEST_CASE("uniform softmax adds log K per example") {
    const NormalPrior prior = NormalPrior::isotropic(HeadWeights::zeros(2, 1), 1.0);
    std::vector<LabeledFeature> data{{0, Vector::Constant(1, 0.7), 1}};
    CHECK(loss_at(Matrix::Zero(2, 2), data, prior) == doctest::Approx(std::log(2.0) + 2 * kLog2Pi));
}

TEST_CASE("gradient and Hessian agree with finite differences") {
    RandomStream rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(3);
        const std::size_t f = 1 + rng.below(4);
        const std::size_t n = rng.below(12);
        const auto data = random_data(rng, n, f, k);
        const NormalPrior prior = random_prior(rng, k, f, trial % 2 == 0);
        const Matrix w = random_matrix(rng, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f + 1));
        const Objective obj = objective(HeadWeights(w), data, prior);

        const Vector g = vec_rows(obj.gradient);
        const Vector g_fd = fd_gradient(w, data, prior, 1e-5);
        CHECK((g - g_fd).norm() / std::max(1.0, g.norm()) < 1e-5);

        const Matrix h_fd = fd_hessian(w, data, prior, 1e-5);
        CHECK((obj.hessian - h_fd).norm() / std::max(1.0, obj.hessian.norm()) < 1e-4);
        CHECK(obj.hessian == obj.hessian.transpose());
    }
}

TEST_CASE("likelihood Hessian is the sum of per-example Kronecker products") {
    RandomStream rng(22);
    const auto data = random_data(rng, 7, 3, 4);
    const HeadWeights w(random_matrix(rng, 4, 4));
    Matrix expected = Matrix::Zero(16, 16);
    for (const auto& d : data) {
        const Vector p = softmax_probs(w, d.x);
        const Matrix a = Matrix(p.asDiagonal()) - p * p.transpose();
        const Vector z = augment_bias(d.x);
        expected += kron(a, z * z.transpose());
    }
    CHECK((likelihood_hessian(w, data) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("loss is convex along random chords") {
    RandomStream rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const auto data = random_data(rng, 10, 3, 3, 2.0);
        const NormalPrior prior = random_prior(rng, 3, 3, false);
        const Matrix a = random_matrix(rng, 3, 4) * 2.0;
        const Matrix b = random_matrix(rng, 3, 4) * 2.0;
        const double mid = loss_at(0.5 * (a + b), data, prior);
        CHECK(mid <= 0.5 * (loss_at(a, data, prior) + loss_at(b, data, prior)) + 1e-12);
    }
}

TEST_CASE("fit_map on empty data returns the prior mean exactly") {
    RandomStream rng(24);
    const NormalPrior prior = random_prior(rng, 3, 2, true);
    CHECK(fit_map({}, prior).w == prior.mean().w);
}

TEST_CASE("fit_map with every point carrying both labels stays at zero") {
    std::vector<LabeledFeature> data;
    const Vector x = (Vector(2) << 0.4, -1.3).finished();
    for (std::size_t y : {0u, 1u}) {
        data.push_back({0, x, y});
        data.push_back({1, -x, y});
    }
    const NormalPrior prior = NormalPrior::isotropic(HeadWeights::zeros(2, 2), 1.0);
    CHECK(fit_map(data, prior).w == Matrix::Zero(2, 3));
}

TEST_CASE("fit_map matches an exhaustive grid search") {
    RandomStream rng(25);
    for (int trial = 0; trial < 3; ++trial) {
        const auto data = random_data(rng, 8, 1, 2, 1.5);
        const NormalPrior prior = random_prior(rng, 2, 1, trial % 2 == 0);
        const Matrix fitted = fit_map(data, prior).w;
        const Matrix grid = grid_search_minimum(data, prior);
        CHECK((fitted - grid).cwiseAbs().maxCoeff() < 1e-4);
        CHECK(loss_and_gradient(HeadWeights(fitted), data, prior).second.cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("fit_map is consistent under class relabelling") {
    RandomStream rng(26);
    const std::size_t k = 4;
    auto data = random_data(rng, 40, 3, k);
    const Matrix mean = random_matrix(rng, 4, 4) * 0.2;
    const NormalPrior prior = NormalPrior::isotropic(HeadWeights(mean), 0.5);
    const Matrix fitted = fit_map(data, prior).w;

    const std::array<std::size_t, 4> perm{2, 0, 3, 1};
    Matrix permuted_mean(4, 4);
    for (std::size_t c = 0; c < k; ++c) permuted_mean.row(static_cast<Eigen::Index>(perm[c])) = mean.row(static_cast<Eigen::Index>(c));
    for (auto& d : data) d.y = perm[d.y];
    const Matrix permuted = fit_map(data, NormalPrior::isotropic(HeadWeights(permuted_mean), 0.5)).w;
    for (std::size_t c = 0; c < k; ++c) {
        CHECK((permuted.row(static_cast<Eigen::Index>(perm[c])) - fitted.row(static_cast<Eigen::Index>(c)))
                  .cwiseAbs()
                  .maxCoeff() < 1e-8);
    }
}

TEST_CASE("fit_map rejects mismatched data") {
    const NormalPrior prior = NormalPrior::isotropic(HeadWeights::zeros(2, 2), 1.0);
    std::vector<LabeledFeature> bad{{0, Vector::Zero(3), 0}};
    CHECK_THROWS_AS(fit_map(bad, prior), Error);
    std::vector<LabeledFeature> bad_label{{0, Vector::Zero(2), 2}};
    CHECK_THROWS_AS(fit_map(bad_label, prior), Error);
}

TEST_CASE("feature jitter augmentation is deterministic in its seed") {
    RandomStream rng(27);
    const auto data = random_data(rng, 5, 2, 2);
    FitConfig cfg;
    cfg.feature_jitter_std = 0.1;
    cfg.jitter_copies = 3;
    cfg.jitter_seed = 9;
    const auto a = augment_with_jitter(data, cfg);
    const auto b = augment_with_jitter(data, cfg);
    REQUIRE(a.size() == 20);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].x == b[i].x);
        CHECK(a[i].y == data[i % 5].y);
    }
}

TEST_CASE("laplace posterior of empty data is the prior") {
    RandomStream rng(28);
    const NormalPrior prior = random_prior(rng, 3, 2, true);
    const LearnerPosterior post = laplace_posterior({}, prior);
    CHECK(post.mode().w == prior.mean().w);
    CHECK(rel_frobenius(post.covariance().matrix(), prior.dense_covariance()) < 1e-12);
}

TEST_CASE("laplace covariance inverts the numerical curvature at the mode") {
    RandomStream rng(29);
    for (int trial = 0; trial < 5; ++trial) {
        const auto data = random_data(rng, 12, 0, 2);
        const NormalPrior prior = random_prior(rng, 2, 0, trial % 2 == 1);
        const LearnerPosterior post = laplace_posterior(data, prior);
        const Matrix h = fd_hessian_from_loss(post.mode().w, data, prior, 1e-3);
        const Matrix cov_fd = h.inverse();
        CHECK((post.covariance().matrix() - cov_fd).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("posterior variance shrinks as data accumulate") {
    RandomStream rng(30);
    const auto data = random_data(rng, 200, 2, 3);
    const NormalPrior prior = NormalPrior::isotropic(HeadWeights::zeros(3, 2), 1.0);
    double previous = prior.dense_covariance().trace();
    for (std::size_t n : {10u, 50u, 200u}) {
        const LearnerPosterior post = laplace_posterior(std::span(data).first(n), prior);
        const double tr = post.covariance().matrix().trace();
        CHECK(tr < previous);
        previous = tr;
    }
}

TEST_CASE("predictive under a point-mass posterior is the softmax") {
    RandomStream rng(31);
    const HeadWeights mode(random_matrix(rng, 3, 3));
    const LearnerPosterior post(mode, SpdMatrix(Matrix::Zero(9, 9)));
    const Vector x = (Vector(2) << 0.3, -0.8).finished();
    const Vector p = softmax_probs(mode, x);
    RandomStream draws(32);
    for (std::size_t c = 0; c < 3; ++c) CHECK(posterior_predictive(post, x, c, 17, draws) == doctest::Approx(p(static_cast<Eigen::Index>(c))).epsilon(1e-14));
}

TEST_CASE("predictive is symmetric for a symmetric posterior") {
    const LearnerPosterior post(HeadWeights::zeros(2, 2), SpdMatrix::identity(6));
    RandomStream rng(33);
    const PredictiveEstimate e = posterior_predictive_stats(post, Vector::Constant(2, 0.5), 0, 20000, rng);
    CHECK(std::fabs(e.mean - 0.5) < 4 * e.std_error);
    CHECK(e.std_error > 0.0);
}

TEST_CASE("all-class predictive sums to one") {
    RandomStream rng(34);
    const LearnerPosterior post(HeadWeights(random_matrix(rng, 5, 4)), random_spd(rng, 20));
    for (int trial = 0; trial < 10; ++trial) {
        const Vector x = random_matrix(rng, 3, 1);
        const Vector p = posterior_predictive_all(post, x, 100, rng);
        CHECK(std::fabs(p.sum() - 1.0) < 1e-12);
    }
}

TEST_CASE("Monte Carlo predictive matches two-dimensional quadrature") {
    RandomStream rng(35);
    for (int trial = 0; trial < 4; ++trial) {
        const auto data = random_data(rng, 6, 2, 2);
        const NormalPrior prior = random_prior(rng, 2, 2, trial % 2 == 0);
        const LearnerPosterior post = laplace_posterior(data, prior);
        const Vector x = random_matrix(rng, 2, 1);
        const double exact = testing::two_class_predictive_quadrature(post.mode().w, post.covariance().matrix(), x);
        const PredictiveEstimate e = posterior_predictive_stats(post, x, 0, 10000, rng);
        CHECK(std::fabs(e.mean - exact) < 0.05);
        CHECK(std::fabs(e.mean - exact) < 4 * e.std_error + 1e-3);
    }
}

TEST_CASE("predictive argument validation") {
    const LearnerPosterior post(HeadWeights::zeros(2, 1), SpdMatrix::identity(4));
    RandomStream rng(36);
    CHECK_THROWS_AS(posterior_predictive(post, Vector::Zero(1), 0, 0, rng), Error);
    CHECK_THROWS_AS(posterior_predictive(post, Vector::Zero(2), 0, 5, rng), Error);
    CHECK_THROWS_AS(posterior_predictive(post, Vector::Zero(1), 2, 5, rng), Error);
}

TEST_CASE("slicing a two-class prior is the identity") {
    RandomStream rng(37);
    for (bool kr : {true, false}) {
        const NormalPrior full = random_prior(rng, 2, 3, kr);
        const NormalPrior s = slice_prior(full, 0, 1);
        CHECK(s.mean().w == full.mean().w);
        CHECK(rel_frobenius(s.dense_precision(), full.dense_precision()) < 1e-12);
    }
}

TEST_CASE("slice keeps the selected mean rows bit for bit") {
    RandomStream rng(38);
    const NormalPrior full = random_prior(rng, 5, 3, true);
    const NormalPrior s = slice_prior(full, 3, 1);
    CHECK(s.mean().w.row(0) == full.mean().w.row(3));
    CHECK(s.mean().w.row(1) == full.mean().w.row(1));
}

TEST_CASE("slice is the marginal of the full prior") {
    RandomStream rng(39);
    for (bool kr : {true, false}) {
        const NormalPrior full = random_prior(rng, 4, 2, kr);
        const NormalPrior s = slice_prior(full, 2, 0);
        const PriorSampler sampler(full);
        const std::size_t n = 100000;
        Matrix rows(n, 6);
        RandomStream draws(40);
        for (std::size_t i = 0; i < n; ++i) {
            const HeadWeights w = sampler.draw(draws);
            rows.row(static_cast<Eigen::Index>(i)) << w.w.row(2), w.w.row(0);
        }
        CHECK(rel_frobenius(testing::empirical_covariance(rows), s.dense_covariance()) < 0.05);
    }
}

TEST_CASE("slice rejects invalid class pairs") {
    const NormalPrior full = NormalPrior::isotropic(HeadWeights::zeros(3, 1), 1.0);
    for (auto [t, a] : {std::pair<std::size_t, std::size_t>{1, 1}, {0, 3}, {5, 0}}) {
        try {
            slice_prior(full, t, a);
            FAIL("expected InvalidClassPair");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::invalid_class_pair);
        }
    }
}

TEST_CASE("prior sampler moments follow the dense covariance") {
    RandomStream rng(41);
    const NormalPrior prior = random_prior(rng, 2, 1, false);
    const PriorSampler sampler(prior);
    const std::size_t n = 100000;
    Matrix v(n, 4);
    RandomStream draws(42);
    for (std::size_t i = 0; i < n; ++i) v.row(static_cast<Eigen::Index>(i)) = vec_rows(sampler.draw(draws).w).transpose();
    CHECK(rel_frobenius(testing::empirical_covariance(v), prior.dense_covariance()) < 0.05);
}
