// AVX2/FMA variants. Compiled with -mavx2 -mfma; only reached after the
// dispatcher has confirmed CPU support.

#include "kernels_impl.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace bt::kernels::avx2 {

namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

inline __m256d abs_pd(__m256d v) {
    return _mm256_andnot_pd(_mm256_set1_pd(-0.0), v);
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    __m256d acc2 = _mm256_setzero_pd();
    __m256d acc3 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
        acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), acc2);
        acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), acc3);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    double s = hsum(_mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3)));
    for (; i < n; ++i) s = std::fma(a[i], b[i], s);
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
            const __m256d av = _mm256_set1_pd(a);
            const double* brow = b + p * ldb;
            std::size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256d c0 = _mm256_loadu_pd(crow + j);
                __m256d c1 = _mm256_loadu_pd(crow + j + 4);
                c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j), c0);
                c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j + 4), c1);
                _mm256_storeu_pd(crow + j, c0);
                _mm256_storeu_pd(crow + j + 4, c1);
            }
            for (; j + 4 <= n; j += 4) {
                __m256d c0 = _mm256_loadu_pd(crow + j);
                c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j), c0);
                _mm256_storeu_pd(crow + j, c0);
            }
            for (; j < n; ++j) crow[j] = std::fma(a, brow[j], crow[j]);
        }
    }
}

void multiply_clamp(const double* x, const double* mask, double* out, std::size_t pixels,
                    std::size_t channels) {
    if (channels != 1) {
        scalar::multiply_clamp(x, mask, out, pixels, channels);
        return;
    }
    const __m256d zero = _mm256_setzero_pd();
    const __m256d one = _mm256_set1_pd(1.0);
    std::size_t p = 0;
    for (; p + 4 <= pixels; p += 4) {
        __m256d v = _mm256_mul_pd(_mm256_loadu_pd(x + p), _mm256_loadu_pd(mask + p));
        // Operand order mirrors std::max(v, 0) / std::min(v, 1), including signed zeros.
        v = _mm256_max_pd(zero, v);
        v = _mm256_min_pd(one, v);
        _mm256_storeu_pd(out + p, v);
    }
    scalar::multiply_clamp(x + p, mask + p, out + p, pixels - p, 1);
}

void neumaier_axpy(double* sum, double* comp, const double* x, double w, std::size_t n) {
    const __m256d wv = _mm256_set1_pd(w);
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        const __m256d t = _mm256_mul_pd(wv, _mm256_loadu_pd(x + j));
        const __m256d s = _mm256_loadu_pd(sum + j);
        const __m256d y = _mm256_add_pd(s, t);
        const __m256d s_big = _mm256_cmp_pd(abs_pd(s), abs_pd(t), _CMP_GE_OQ);
        const __m256d when_s = _mm256_add_pd(_mm256_sub_pd(s, y), t);
        const __m256d when_t = _mm256_add_pd(_mm256_sub_pd(t, y), s);
        const __m256d delta = _mm256_blendv_pd(when_t, when_s, s_big);
        _mm256_storeu_pd(comp + j, _mm256_add_pd(_mm256_loadu_pd(comp + j), delta));
        _mm256_storeu_pd(sum + j, y);
    }
    scalar::neumaier_axpy(sum + j, comp + j, x + j, w, n - j);
}

void minmax_update(double* lo, double* hi, const double* x, std::size_t n) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        const __m256d v = _mm256_loadu_pd(x + j);
        _mm256_storeu_pd(lo + j, _mm256_min_pd(v, _mm256_loadu_pd(lo + j)));
        _mm256_storeu_pd(hi + j, _mm256_max_pd(v, _mm256_loadu_pd(hi + j)));
    }
    scalar::minmax_update(lo + j, hi + j, x + j, n - j);
}

}  // namespace bt::kernels::avx2
