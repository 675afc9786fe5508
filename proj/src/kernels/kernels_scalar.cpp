// Reference kernels. Built with -ffp-contract=off so that the compiler does not
// fuse multiply-adds behind our back; these define the expected results.

#include "kernels_impl.hpp"

#include <algorithm>
#include <cmath>

namespace bt::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void trmm_lower(std::size_t m, std::size_t n, const double* l, std::size_t ldl, const double* b,
                std::size_t ldb, double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        std::fill(crow, crow + n, 0.0);
        const double* lrow = l + i * ldl;
        for (std::size_t p = 0; p <= i; ++p) {
            const double a = lrow[p];
            if (a == 0.0) continue;
            const double* brow = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

void multiply_clamp(const double* x, const double* mask, double* out, std::size_t pixels,
                    std::size_t channels) {
    for (std::size_t p = 0; p < pixels; ++p) {
        const double m = mask[p];
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const double v = x[p * channels + ch] * m;
            out[p * channels + ch] = std::min(std::max(v, 0.0), 1.0);
        }
    }
}

void neumaier_axpy(double* sum, double* comp, const double* x, double w, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        const double t = w * x[j];
        const double s = sum[j];
        const double y = s + t;
        if (std::fabs(s) >= std::fabs(t)) {
            comp[j] += (s - y) + t;
        } else {
            comp[j] += (t - y) + s;
        }
        sum[j] = y;
    }
}

void minmax_update(double* lo, double* hi, const double* x, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        lo[j] = std::min(lo[j], x[j]);
        hi[j] = std::max(hi[j], x[j]);
    }
}

}  // namespace bt::kernels::scalar
