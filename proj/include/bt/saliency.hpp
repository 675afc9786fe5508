#pragma once

#include "bt/gaussian_core.hpp"
#include "bt/image.hpp"
#include "bt/random.hpp"
#include "bt/scorer.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bt {

/// Row-major height × width, values strictly inside (0,1).
struct Mask {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<double> values;
};

/// Mask prior for a width × height image: mean −100, marginal standard
/// deviation 100, length scale 0.1·width (22.4 px at 224).
GridGpConfig mask_gp_config(std::uint32_t width, std::uint32_t height);

/// 1/(1+exp(−a)), clamped to [DBL_MIN, 1 − 2⁻⁵³] so no value reaches 0 or 1.
double squash(double a) noexcept;

/// Mask i is the squashed GP field drawn from rng.child(i).
std::vector<Mask> sample_masks(const GridGpConfig& cfg, std::size_t n, const RandomStream& rng,
                               std::size_t jobs = 1);

/// Pixelwise product, mask shared across channels, clamped to [0,1].
Image apply_mask(const Image& img, const Mask& mask);

struct SaliencyMap {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<double> values;
    std::size_t n_masks = 0;
    std::uint64_t seed = 0;
    std::uint32_t category = 0;
    std::string scorer;
};

/// Σ wᵢ mᵢ / Σ wᵢ with compensated sums in mask order, each pixel clamped to
/// the range of the positively weighted masks there. Weights must be finite
/// and non-negative; DegenerateWeights if their sum is at most 1e-300.
/// Scaling every weight by a power of two leaves the result bit-identical.
std::vector<double> weighted_mask_average(std::span<const Mask> masks, std::span<const double> weights);

struct ExpectedMapOptions {
    std::size_t parallelism = 1;  // scorer requests in flight
    std::uint64_t seed = 0;       // recorded in the map; the seed the masks came from
};

/// Expected mask under Q(c | x masked by m).
SaliencyMap expected_map(const Image& img, std::uint32_t category, std::span<const Mask> masks, Scorer& scorer,
                         const ExpectedMapOptions& opts = {});

/// Binary PGM (P5, maxval 255), pixel = round(255·value).
std::string encode_pgm(const SaliencyMap& map);

/// JSON header line {"width","height","n_masks","seed","category"}, then the
/// values as little-endian float32, row-major.
std::string encode_raw(const SaliencyMap& map);
SaliencyMap decode_raw(std::string_view data);

/// Writes <stem>.pgm and <stem>.raw.
void save_map(const SaliencyMap& map, const std::string& stem);

}  // namespace bt
