#include <atomic>
#include <cstdlib>

#include "ifsr/kernels.hpp"

namespace ifsr::kern {
namespace {

std::atomic<const Kernels*> g_active{nullptr};

const Kernels* resolve_auto() {
#if defined(IFSR_HAVE_AVX2)
    if (avx2_supported()) return &avx2_kernels();
#endif
    return &scalar_kernels();
}

const Kernels* resolve(const std::string& name) {
    if (name == "auto") return resolve_auto();
    if (name == "scalar") return &scalar_kernels();
    if (name == "avx2") {
        if (!avx2_compiled()) fail("kernels: avx2 variant not compiled into this binary");
        if (!avx2_supported()) fail("kernels: avx2 not supported by this CPU");
#if defined(IFSR_HAVE_AVX2)
        return &avx2_kernels();
#endif
    }
    throw std::invalid_argument("kernels: unknown variant '" + name + "'");
}

}  // namespace

bool avx2_compiled() {
#if defined(IFSR_HAVE_AVX2)
    return true;
#else
    return false;
#endif
}

bool avx2_supported() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Kernels& active() {
    const Kernels* k = g_active.load(std::memory_order_acquire);
    if (!k) {
        const char* env = std::getenv("IFSR_KERNELS");
        k = resolve(env ? std::string(env) : std::string("auto"));
        g_active.store(k, std::memory_order_release);
    }
    return *k;
}

void select(const std::string& name) {
    g_active.store(resolve(name), std::memory_order_release);
}

}  // namespace ifsr::kern
