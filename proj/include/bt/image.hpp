#pragma once

#include "bt/gaussian_core.hpp"

#include <cstdint>
#include <vector>

namespace bt {

/// Row-major height × width × channels, values in [0,1].
struct Image {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t channels = 1;
    std::vector<double> pixels;

    static Image filled(std::uint32_t width, std::uint32_t height, std::uint32_t channels, double value = 0.0);

    std::size_t plane_size() const noexcept { return std::size_t{width} * height; }
    double& at(std::uint32_t y, std::uint32_t x, std::uint32_t c = 0) {
        return pixels[(std::size_t{y} * width + x) * channels + c];
    }
    double at(std::uint32_t y, std::uint32_t x, std::uint32_t c = 0) const {
        return pixels[(std::size_t{y} * width + x) * channels + c];
    }

    /// Positive dimensions, matching pixel count, finite values.
    void validate() const;
};

/// Channel-mean grayscale, area-averaged onto a grid × grid lattice and
/// flattened row-major. Non-integer ratios use fractional pixel overlaps.
Vector grayscale_features(const Image& img, std::size_t grid = 16);

}  // namespace bt
