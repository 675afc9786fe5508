#pragma once

#include <cstddef>

namespace bt::kernels {

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void trmm_lower(std::size_t m, std::size_t n, const double* l, std::size_t ldl, const double* b,
                std::size_t ldb, double* c, std::size_t ldc);
void multiply_clamp(const double* x, const double* mask, double* out, std::size_t pixels,
                    std::size_t channels);
void neumaier_axpy(double* sum, double* comp, const double* x, double w, std::size_t n);
void minmax_update(double* lo, double* hi, const double* x, std::size_t n);
}  // namespace scalar

#if defined(BT_HAVE_AVX2)
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void trmm_lower(std::size_t m, std::size_t n, const double* l, std::size_t ldl, const double* b,
                std::size_t ldb, double* c, std::size_t ldc);
void multiply_clamp(const double* x, const double* mask, double* out, std::size_t pixels,
                    std::size_t channels);
void neumaier_axpy(double* sum, double* comp, const double* x, double w, std::size_t n);
void minmax_update(double* lo, double* hi, const double* x, std::size_t n);
}  // namespace avx2
#endif

}  // namespace bt::kernels
