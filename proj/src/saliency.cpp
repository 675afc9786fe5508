#include "bt/saliency.hpp"

#include "bt/errors.hpp"
#include "bt/kernels.hpp"
#include "bt/parallel.hpp"
#include "binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>

namespace bt {

GridGpConfig mask_gp_config(std::uint32_t width, std::uint32_t height) {
    GridGpConfig cfg;
    cfg.width = width;
    cfg.height = height;
    cfg.mean = -100.0;
    cfg.amplitude = 100.0;
    cfg.length_scale = 0.1 * static_cast<double>(width);
    return cfg;
}

double squash(double a) noexcept {
    double s;
    if (a >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-a));
    } else {
        const double e = std::exp(a);
        s = e / (1.0 + e);
    }
    return std::clamp(s, DBL_MIN, 1.0 - DBL_EPSILON / 2.0);
}

std::vector<Mask> sample_masks(const GridGpConfig& cfg, std::size_t n, const RandomStream& rng, std::size_t jobs) {
    cfg.validate();
    const std::vector<Matrix> fields = sample_gp_grid(cfg, rng, n, jobs);
    std::vector<Mask> masks(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        Mask& m = masks[i];
        m.width = static_cast<std::uint32_t>(cfg.width);
        m.height = static_cast<std::uint32_t>(cfg.height);
        m.values.resize(cfg.width * cfg.height);
        const Matrix& f = fields[i];
        for (std::size_t y = 0; y < cfg.height; ++y)
            for (std::size_t x = 0; x < cfg.width; ++x)
                m.values[y * cfg.width + x] = squash(f(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)));
    });
    return masks;
}

Image apply_mask(const Image& img, const Mask& mask) {
    img.validate();
    if (mask.width != img.width || mask.height != img.height || mask.values.size() != img.plane_size())
        throw_dimension_mismatch("mask does not match the image plane");
    Image out = img;
    kernels::active().multiply_clamp(img.pixels.data(), mask.values.data(), out.pixels.data(), img.plane_size(),
                                     img.channels);
    return out;
}

std::vector<double> weighted_mask_average(std::span<const Mask> masks, std::span<const double> weights) {
    if (masks.empty()) throw Error(ErrorKind::invalid_argument, "at least one mask is required");
    if (weights.size() != masks.size()) throw_dimension_mismatch("one weight per mask");
    const std::size_t n = masks.front().values.size();
    for (const Mask& m : masks)
        if (m.values.size() != n || m.width != masks.front().width || m.height != masks.front().height)
            throw_dimension_mismatch("masks differ in size");

    double total = 0.0, total_comp = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0) throw Error(ErrorKind::invalid_argument, "mask weights must be finite and non-negative");
        const double t = total + w;
        total_comp += std::fabs(total) >= std::fabs(w) ? (total - t) + w : (w - t) + total;
        total = t;
    }
    total += total_comp;
    if (!(total > 1e-300))
        throw Error(ErrorKind::degenerate_weights, "mask weights sum to " + std::to_string(total));

    const auto& k = kernels::active();
    std::vector<double> sum(n, 0.0), comp(n, 0.0);
    // Range over the masks that carry weight; a point weight returns its mask.
    std::vector<double> lo(n, std::numeric_limits<double>::infinity()), hi(n, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (weights[i] == 0.0) continue;
        k.neumaier_axpy(sum.data(), comp.data(), masks[i].values.data(), weights[i], n);
        k.minmax_update(lo.data(), hi.data(), masks[i].values.data(), n);
    }
    std::vector<double> out(n);
    for (std::size_t p = 0; p < n; ++p) out[p] = std::clamp((sum[p] + comp[p]) / total, lo[p], hi[p]);
    return out;
}

SaliencyMap expected_map(const Image& img, std::uint32_t category, std::span<const Mask> masks, Scorer& scorer,
                         const ExpectedMapOptions& opts) {
    img.validate();
    if (masks.empty()) throw Error(ErrorKind::invalid_argument, "at least one mask is required");
    if (category >= scorer.classes()) throw Error(ErrorKind::invalid_argument, "category out of range for the scorer");

    // Masked images are built and scored in chunks to bound memory.
    constexpr std::size_t chunk = 256;
    std::vector<double> scores;
    scores.reserve(masks.size());
    std::vector<Image> batch;
    for (std::size_t start = 0; start < masks.size(); start += chunk) {
        const std::size_t end = std::min(masks.size(), start + chunk);
        batch.resize(end - start);
        parallel_for(end - start, opts.parallelism,
                     [&](std::size_t i) { batch[i] = apply_mask(img, masks[start + i]); });
        const auto part = batch_score(scorer, batch, category, opts.parallelism);
        scores.insert(scores.end(), part.begin(), part.end());
    }

    SaliencyMap map;
    map.width = img.width;
    map.height = img.height;
    map.n_masks = masks.size();
    map.seed = opts.seed;
    map.category = category;
    map.scorer = scorer.id();
    try {
        map.values = weighted_mask_average(masks, scores);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::degenerate_weights) throw;
        throw Error(ErrorKind::degenerate_weights, std::string(e.what()) + " for category " + std::to_string(category) +
                                                       " with scorer " + map.scorer);
    }
    return map;
}

std::string encode_pgm(const SaliencyMap& map) {
    std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    out.reserve(out.size() + map.values.size());
    for (double v : map.values) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)))));
    return out;
}

std::string encode_raw(const SaliencyMap& map) {
    nlohmann::ordered_json h;
    h["width"] = map.width;
    h["height"] = map.height;
    h["n_masks"] = map.n_masks;
    h["seed"] = map.seed;
    h["category"] = map.category;
    io::Writer w;
    w.bytes(h.dump());
    w.bytes("\n");
    for (double v : map.values) w.put(static_cast<float>(v));
    return w.take();
}

SaliencyMap decode_raw(std::string_view data) {
    const auto nl = data.find('\n');
    if (nl == std::string_view::npos) throw TruncatedFile(data.size());
    const auto h = nlohmann::json::parse(data.substr(0, nl), nullptr, false);
    if (h.is_discarded() || !h.is_object()) throw Error(ErrorKind::io_error, "saliency sidecar header is not JSON");
    SaliencyMap map;
    try {
        map.width = h.at("width").get<std::uint32_t>();
        map.height = h.at("height").get<std::uint32_t>();
        map.n_masks = h.at("n_masks").get<std::size_t>();
        map.seed = h.at("seed").get<std::uint64_t>();
        map.category = h.at("category").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::io_error, std::string("saliency sidecar header: ") + e.what());
    }
    io::Reader r(data.substr(nl + 1));
    map.values.resize(std::size_t{map.width} * map.height);
    for (double& v : map.values) v = r.get<float>();
    if (!r.at_end()) throw Error(ErrorKind::io_error, "trailing bytes after saliency values");
    return map;
}

void save_map(const SaliencyMap& map, const std::string& stem) {
    io::write_file(stem + ".pgm", encode_pgm(map));
    io::write_file(stem + ".raw", encode_raw(map));
}

}  // namespace bt
