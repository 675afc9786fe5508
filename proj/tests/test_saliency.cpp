#include "bt/errors.hpp"
#include "bt/saliency.hpp"

#include "doctest.h"
#include "test_support.hpp"

#include <cfloat>
#include <cmath>
#include <cstring>

using namespace bt;

namespace {

// Returns the same probability for every image.
class FixedScorer final : public Scorer {
public:
    FixedScorer(std::size_t classes, double p) : classes_(classes), p_(p) {}
    std::size_t classes() const override { return classes_; }
    std::string id() const override { return "fixed"; }
    std::vector<double> score(const Image&, std::span<const std::uint32_t> c) override {
        return std::vector<double>(c.size(), p_);
    }
    std::unique_ptr<Scorer> clone() const override { return std::make_unique<FixedScorer>(classes_, p_); }

private:
    std::size_t classes_;
    double p_;
};

std::vector<Mask> random_masks(RandomStream& rng, std::size_t n, std::uint32_t w, std::uint32_t h) {
    std::vector<Mask> masks(n);
    for (auto& m : masks) {
        m.width = w;
        m.height = h;
        m.values.resize(std::size_t{w} * h);
        for (double& v : m.values) v = rng.uniform();
    }
    return masks;
}

Image random_image(RandomStream& rng, std::uint32_t w, std::uint32_t h, std::uint32_t c = 1) {
    Image img = Image::filled(w, h, c);
    for (double& v : img.pixels) v = rng.uniform();
    return img;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("no error thrown");
    return ErrorKind::invalid_argument;
}

}  // namespace

TEST_CASE("squash stays strictly inside the unit interval") {
    CHECK(squash(0.0) == 0.5);
    CHECK(squash(-1000.0) == DBL_MIN);
    CHECK(squash(1000.0) < 1.0);
    CHECK(squash(1000.0) == 1.0 - DBL_EPSILON / 2.0);
    CHECK(std::fabs(squash(2.0) - 1.0 / (1.0 + std::exp(-2.0))) < 1e-16);
    CHECK(std::fabs(squash(-30.0) / std::exp(-30.0) - 1.0) < 1e-12);
    double prev = 0.0;
    for (double a = -800.0; a <= 800.0; a += 0.37) {
        CHECK(squash(a) >= prev);
        prev = squash(a);
    }
}

TEST_CASE("mask prior constants scale with the image width") {
    const GridGpConfig c = mask_gp_config(224, 224);
    CHECK(c.mean == -100.0);
    CHECK(c.amplitude == 100.0);
    CHECK(c.length_scale == doctest::Approx(22.4).epsilon(1e-15));
    CHECK(mask_gp_config(64, 32).length_scale == doctest::Approx(6.4).epsilon(1e-15));
}

TEST_CASE("masks from a flat prior") {
    GridGpConfig cfg = mask_gp_config(12, 9);
    cfg.amplitude = 0.0;
    cfg.mean = 0.0;
    for (const Mask& m : sample_masks(cfg, 4, RandomStream(1)))
        for (double v : m.values) CHECK(v == 0.5);
    cfg.mean = -100.0;
    for (const Mask& m : sample_masks(cfg, 4, RandomStream(2)))
        for (double v : m.values) {
            CHECK(v < 1e-40);
            CHECK(v > 0.0);
        }
}

TEST_CASE("sampled masks are in (0,1), deterministic and prefix stable") {
    const GridGpConfig cfg = mask_gp_config(20, 16);
    const auto a = sample_masks(cfg, 6, RandomStream(3), 1);
    const auto b = sample_masks(cfg, 6, RandomStream(3), 4);
    const auto c = sample_masks(cfg, 3, RandomStream(3), 1);
    std::size_t low = 0, high = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].width == 20);
        CHECK(a[i].height == 16);
        CHECK(a[i].values == b[i].values);
        if (i < 3) CHECK(a[i].values == c[i].values);
        for (double v : a[i].values) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            low += v < 0.01;
            high += v > 0.99;
        }
    }
    // Mean −100 with spread 100 leaves most pixels masked out but not all.
    CHECK(low > high);
    CHECK(high > 0);
}

TEST_CASE("apply_mask") {
    RandomStream rng(4);
    const Image img = random_image(rng, 5, 3, 3);
    Mask ones{5, 3, std::vector<double>(15, 1.0)};
    CHECK(apply_mask(img, ones).pixels == img.pixels);
    Mask zeros{5, 3, std::vector<double>(15, 0.0)};
    for (double v : apply_mask(img, zeros).pixels) CHECK(v == 0.0);
    Mask tiny{5, 3, std::vector<double>(15, DBL_MIN)};
    for (double v : apply_mask(img, tiny).pixels) CHECK(v <= DBL_MIN);

    const Image small = random_image(rng, 2, 2, 1);
    const auto m = random_masks(rng, 1, 2, 2)[0];
    const Image out = apply_mask(small, m);
    for (int p = 0; p < 4; ++p) CHECK(out.pixels[p] == small.pixels[p] * m.values[p]);

    CHECK_THROWS_AS(apply_mask(img, m), Error);
}

TEST_CASE("mask channels share one mask value") {
    RandomStream rng(5);
    const Image img = random_image(rng, 4, 4, 3);
    const Mask m = random_masks(rng, 1, 4, 4)[0];
    const Image out = apply_mask(img, m);
    for (std::uint32_t y = 0; y < 4; ++y)
        for (std::uint32_t x = 0; x < 4; ++x)
            for (std::uint32_t c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == img.at(y, x, c) * m.values[y * 4 + x]);
}

TEST_CASE("constant weights give the unweighted mean") {
    RandomStream rng(6);
    const auto masks = random_masks(rng, 500, 8, 8);
    const auto map = weighted_mask_average(masks, std::vector<double>(500, 0.37));
    for (std::size_t p = 0; p < 64; ++p) {
        double mean = 0.0;
        for (const auto& m : masks) mean += m.values[p];
        mean /= 500.0;
        CHECK(std::fabs(map[p] - mean) < 1e-12);
    }
}

TEST_CASE("a single weighted mask is returned exactly") {
    RandomStream rng(7);
    const auto masks = random_masks(rng, 10, 6, 5);
    std::vector<double> w(10, 0.0);
    w[4] = 1.0;
    CHECK(weighted_mask_average(masks, w) == masks[4].values);
    w[4] = 0.3;
    CHECK(weighted_mask_average(masks, w) == masks[4].values);
    CHECK(weighted_mask_average(std::span(masks).first(1), std::vector<double>{0.77}) == masks[0].values);
}

TEST_CASE("three masks with hand-computed weights") {
    std::vector<Mask> masks(3, Mask{2, 1, {}});
    masks[0].values = {0.1, 0.9};
    masks[1].values = {0.5, 0.2};
    masks[2].values = {0.8, 0.4};
    const auto map = weighted_mask_average(masks, std::vector<double>{0.2, 0.3, 0.5});
    CHECK(std::fabs(map[0] - (0.02 + 0.15 + 0.40)) < 1e-12);
    CHECK(std::fabs(map[1] - (0.18 + 0.06 + 0.20)) < 1e-12);
}

TEST_CASE("weighted averages stay within the per-pixel mask range") {
    RandomStream rng(8);
    for (int t = 0; t < 20; ++t) {
        const auto masks = random_masks(rng, 1 + rng.below(30), 4, 4);
        std::vector<double> w(masks.size());
        for (double& v : w) v = rng.uniform() < 0.3 ? 0.0 : std::pow(rng.uniform(), 8.0);
        w[0] += 1e-3;
        const auto map = weighted_mask_average(masks, w);
        for (std::size_t p = 0; p < 16; ++p) {
            double lo = 1.0, hi = 0.0;
            for (const auto& m : masks) {
                lo = std::min(lo, m.values[p]);
                hi = std::max(hi, m.values[p]);
            }
            CHECK(map[p] >= lo);
            CHECK(map[p] <= hi);
        }
    }
}

TEST_CASE("power-of-two weight scaling leaves the map bit-identical") {
    RandomStream rng(9);
    const auto masks = random_masks(rng, 300, 16, 16);
    std::vector<double> w(300);
    for (double& v : w) v = rng.uniform();
    const auto base = weighted_mask_average(masks, w);
    for (double lambda : {2.0, 0.5, 1024.0, 0x1p-40, 0x1p+60}) {
        std::vector<double> s(w);
        for (double& v : s) v *= lambda;
        CHECK(weighted_mask_average(masks, s) == base);
    }
}

TEST_CASE("other weight scalings agree to rounding") {
    RandomStream rng(10);
    const auto masks = random_masks(rng, 300, 16, 16);
    std::vector<double> w(300);
    for (double& v : w) v = rng.uniform();
    const auto base = weighted_mask_average(masks, w);
    for (double lambda : {3.0, 0.7, 1e-3, 12345.678}) {
        std::vector<double> s(w);
        for (double& v : s) v *= lambda;
        const auto scaled = weighted_mask_average(masks, s);
        std::size_t differ = 0;
        for (std::size_t p = 0; p < base.size(); ++p) {
            differ += scaled[p] != base[p];
            CHECK(std::fabs(scaled[p] - base[p]) <= 4 * DBL_EPSILON * base[p]);
        }
        MESSAGE("lambda " << lambda << ": " << differ << " of " << base.size() << " pixels differ in the last bits");
    }
}

TEST_CASE("degenerate and invalid weights") {
    RandomStream rng(11);
    const auto masks = random_masks(rng, 3, 2, 2);
    CHECK(kind_of([&] { weighted_mask_average(masks, std::vector<double>{0, 0, 0}); }) == ErrorKind::degenerate_weights);
    CHECK(kind_of([&] { weighted_mask_average(masks, std::vector<double>{1e-301, 0, 0}); }) == ErrorKind::degenerate_weights);
    CHECK(kind_of([&] { weighted_mask_average(masks, std::vector<double>{-0.1, 1, 0}); }) == ErrorKind::invalid_argument);
    CHECK(kind_of([&] { weighted_mask_average(masks, std::vector<double>{NAN, 1, 0}); }) == ErrorKind::invalid_argument);
    CHECK(kind_of([&] { weighted_mask_average(masks, std::vector<double>{1, 1}); }) == ErrorKind::dimension_mismatch);
    CHECK(kind_of([&] { weighted_mask_average({}, {}); }) == ErrorKind::invalid_argument);
    CHECK_NOTHROW(weighted_mask_average(masks, std::vector<double>{1e-299, 0, 0}));
}

TEST_CASE("expected_map with the toy scorer matches manual scoring") {
    RandomStream rng(12);
    const Image img = random_image(rng, 32, 32);
    const auto masks = sample_masks(mask_gp_config(32, 32), 100, RandomStream(13));
    ToyScorer toy(HeadWeights(testing::random_matrix(rng, 4, 257) * 5.0));
    std::vector<double> q;
    for (const auto& m : masks) q.push_back(toy.probabilities(apply_mask(img, m))(2));
    const auto expected = weighted_mask_average(masks, q);

    const SaliencyMap a = expected_map(img, 2, masks, toy, {1, 13});
    const SaliencyMap b = expected_map(img, 2, masks, toy, {8, 13});
    CHECK(a.values == expected);
    CHECK(b.values == expected);
    CHECK(a.width == 32);
    CHECK(a.height == 32);
    CHECK(a.n_masks == 100);
    CHECK(a.seed == 13);
    CHECK(a.category == 2);
    CHECK(a.scorer == toy.id());
}

TEST_CASE("expected_map with a constant scorer is the mask mean") {
    RandomStream rng(14);
    const Image img = random_image(rng, 16, 16);
    const auto masks = sample_masks(mask_gp_config(16, 16), 300, RandomStream(15));
    FixedScorer fixed(3, 0.25);
    const SaliencyMap map = expected_map(img, 1, masks, fixed, {3, 0});
    for (std::size_t p = 0; p < map.values.size(); ++p) {
        double mean = 0.0;
        for (const auto& m : masks) mean += m.values[p];
        CHECK(std::fabs(map.values[p] - mean / 300.0) < 1e-12);
    }
}

TEST_CASE("expected_map reports degenerate scores with context") {
    FixedScorer zero(3, 0.0);
    const Image img = Image::filled(4, 4, 1, 0.5);
    const auto masks = sample_masks(mask_gp_config(4, 4), 5, RandomStream(16));
    try {
        expected_map(img, 2, masks, zero);
        FAIL("expected DegenerateWeights");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate_weights);
        CHECK(std::string(e.what()).find("category 2") != std::string::npos);
        CHECK(std::string(e.what()).find("fixed") != std::string::npos);
    }
    CHECK(kind_of([&] { expected_map(img, 3, masks, zero); }) == ErrorKind::invalid_argument);
    CHECK(kind_of([&] { expected_map(img, 0, {}, zero); }) == ErrorKind::invalid_argument);
}

TEST_CASE("PGM encoding") {
    SaliencyMap map;
    map.width = 3;
    map.height = 2;
    map.values = {0.0, 1.0, 0.5, 0.2, 0.999, 0.001};
    const std::string pgm = encode_pgm(map);
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(pgm.size() == header.size() + 6);
    CHECK(pgm.compare(0, header.size(), header) == 0);
    const unsigned char expect[6] = {0, 255, 128, 51, 255, 0};
    CHECK(std::memcmp(pgm.data() + header.size(), expect, 6) == 0);
}

TEST_CASE("raw sidecar round trip") {
    RandomStream rng(17);
    SaliencyMap map;
    map.width = 7;
    map.height = 5;
    map.n_masks = 1000;
    map.seed = 0xFFFFFFFFFFFFFFF0ull;
    map.category = 4;
    for (int i = 0; i < 35; ++i) map.values.push_back(rng.uniform());
    const std::string raw = encode_raw(map);
    const std::string header = R"({"width":7,"height":5,"n_masks":1000,"seed":18446744073709551600,"category":4})";
    CHECK(raw.substr(0, header.size() + 1) == header + "\n");
    CHECK(raw.size() == header.size() + 1 + 35 * 4);
    const SaliencyMap back = decode_raw(raw);
    CHECK(back.width == 7);
    CHECK(back.seed == map.seed);
    CHECK(back.category == 4);
    CHECK(back.n_masks == 1000);
    for (int i = 0; i < 35; ++i) CHECK(back.values[i] == static_cast<float>(map.values[i]));
    CHECK_THROWS_AS(decode_raw(raw.substr(0, raw.size() - 3)), TruncatedFile);
    CHECK_THROWS_AS(decode_raw(raw + "x"), Error);
}
