#include "bt/image.hpp"

#include "bt/errors.hpp"

#include <algorithm>
#include <cmath>

namespace bt {

Image Image::filled(std::uint32_t width, std::uint32_t height, std::uint32_t channels, double value) {
    Image img;
    img.width = width;
    img.height = height;
    img.channels = channels;
    img.pixels.assign(std::size_t{width} * height * channels, value);
    return img;
}

void Image::validate() const {
    if (width == 0 || height == 0 || channels == 0) throw Error(ErrorKind::invalid_argument, "image dimensions must be positive");
    if (pixels.size() != plane_size() * channels) throw_dimension_mismatch("image pixel count does not match its dimensions");
    for (double v : pixels) {
        if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "image has non-finite pixels");
    }
}

namespace {

// grid × n matrix whose row g averages source cells [g·n/grid, (g+1)·n/grid).
Matrix area_weights(std::size_t grid, std::size_t n) {
    Matrix r = Matrix::Zero(static_cast<Eigen::Index>(grid), static_cast<Eigen::Index>(n));
    const double span = static_cast<double>(n) / static_cast<double>(grid);
    for (std::size_t g = 0; g < grid; ++g) {
        const double lo = static_cast<double>(g) * span;
        const double hi = lo + span;
        const auto first = static_cast<std::size_t>(std::floor(lo));
        for (std::size_t i = first; i < n && static_cast<double>(i) < hi; ++i) {
            const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
            if (overlap > 0) r(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(i)) = overlap / span;
        }
    }
    return r;
}

}  // namespace

Vector grayscale_features(const Image& img, std::size_t grid) {
    img.validate();
    Matrix gray(img.height, img.width);
    for (std::uint32_t y = 0; y < img.height; ++y) {
        for (std::uint32_t x = 0; x < img.width; ++x) {
            double s = 0.0;
            for (std::uint32_t c = 0; c < img.channels; ++c) s += img.at(y, x, c);
            gray(y, x) = s / img.channels;
        }
    }
    const Matrix small = area_weights(grid, img.height) * gray * area_weights(grid, img.width).transpose();
    return vec_rows(small);
}

}  // namespace bt
