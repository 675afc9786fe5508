#pragma once

#include <cstddef>
#include <string_view>

// Inner-loop kernels. Each entry has a scalar reference implementation and,
// where the host supports it, an AVX2/FMA variant. The variant is picked once
// per process (cpuid, overridable with BT_SIMD=scalar|avx2) and then fixed, so
// results are reproducible within a host.
//
// Elementwise kernels (multiply_clamp, neumaier_axpy, minmax_update) are
// bit-identical across variants. Reductions (dot, trmm_lower) differ only by
// FMA rounding and summation order.

namespace bt::kernels {

struct KernelTable {
    std::string_view name;

    /// sum_i a[i] * b[i]
    double (*dot)(const double* a, const double* b, std::size_t n);

    /// C[m x n] = L[m x m] * B[m x n], L lower triangular; row-major with
    /// leading dimensions ldl, ldb, ldc. Entries of L above the diagonal are
    /// never read.
    void (*trmm_lower)(std::size_t m, std::size_t n, const double* l, std::size_t ldl,
                       const double* b, std::size_t ldb, double* c, std::size_t ldc);

    /// out[p*channels + ch] = clamp(x[p*channels + ch] * mask[p], 0, 1)
    void (*multiply_clamp)(const double* x, const double* mask, double* out, std::size_t pixels,
                           std::size_t channels);

    /// Neumaier-compensated sum[j] += w * x[j], compensation carried in comp[j].
    void (*neumaier_axpy)(double* sum, double* comp, const double* x, double w, std::size_t n);

    /// lo[j] = min(lo[j], x[j]); hi[j] = max(hi[j], x[j])
    void (*minmax_update)(double* lo, double* hi, const double* x, std::size_t n);
};

const KernelTable& scalar_kernels() noexcept;

/// AVX2/FMA table, or nullptr when not compiled in or not supported by the CPU.
const KernelTable* avx2_kernels() noexcept;

/// The table selected for this process.
const KernelTable& active() noexcept;

}  // namespace bt::kernels
