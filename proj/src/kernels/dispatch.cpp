#include "bt/kernels.hpp"

#include "kernels_impl.hpp"

#include <cstdlib>
#include <string_view>

namespace bt::kernels {

namespace {

constexpr KernelTable kScalar{
    "scalar",
    &scalar::dot,
    &scalar::trmm_lower,
    &scalar::multiply_clamp,
    &scalar::neumaier_axpy,
    &scalar::minmax_update,
};

#if defined(BT_HAVE_AVX2)
constexpr KernelTable kAvx2{
    "avx2",
    &avx2::dot,
    &avx2::trmm_lower,
    &avx2::multiply_clamp,
    &avx2::neumaier_axpy,
    &avx2::minmax_update,
};
#endif

bool cpu_has_avx2() noexcept {
#if defined(BT_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable& select() noexcept {
    const char* env = std::getenv("BT_SIMD");
    std::string_view choice = env ? env : "auto";
    if (choice == "scalar") return kScalar;
    if (const KernelTable* t = avx2_kernels()) return *t;
    return kScalar;
}

}  // namespace

const KernelTable& scalar_kernels() noexcept { return kScalar; }

const KernelTable* avx2_kernels() noexcept {
#if defined(BT_HAVE_AVX2)
    static const bool supported = cpu_has_avx2();
    return supported ? &kAvx2 : nullptr;
#else
    return nullptr;
#endif
}

const KernelTable& active() noexcept {
    static const KernelTable& table = select();
    return table;
}

}  // namespace bt::kernels
