#pragma once

#include <cstddef>
#include <string>

#include "ifsr/common.hpp"

namespace ifsr::kern {

/// One table of the arithmetic inner-loop kernels. `scalar` is the reference
/// implementation; ISA variants must agree with it within the tolerances
/// pinned in test_kernels.cpp.
struct Kernels {
    const char* name;

    double (*dot)(const double* a, const double* b, std::size_t n);
    /// sum_i a_i^2 * w_i  (activation variance f' diag(s2) f)
    double (*dot_sq)(const double* a, const double* w, std::size_t n);
    double (*sum)(const double* a, std::size_t n);
    /// y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    void (*exp_many)(const double* x, double* y, std::size_t n);
    void (*sigmoid_many)(const double* x, double* y, std::size_t n);
    /// softplus(x) = log(1 + e^x), evaluated as max(x,0) + log1p(e^-|x|)
    void (*softplus_many)(const double* x, double* y, std::size_t n);
};

const Kernels& scalar_kernels();

/// True when the binary contains the AVX2 variant.
bool avx2_compiled();
/// True when the running CPU can execute it.
bool avx2_supported();
#if defined(IFSR_HAVE_AVX2)
const Kernels& avx2_kernels();
#endif

/// Active table. First use resolves "auto": AVX2 when compiled in and
/// supported, scalar otherwise. IFSR_KERNELS=scalar|avx2|auto overrides.
const Kernels& active();

/// Force a table by name ("scalar", "avx2", "auto"). Throws std::invalid_argument
/// for unknown names and std::runtime_error when the ISA is unavailable.
void select(const std::string& name);

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline double dot_sq(const double* a, const double* w, std::size_t n) { return active().dot_sq(a, w, n); }
inline double sum(const double* a, std::size_t n) { return active().sum(a, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy(alpha, x, y, n); }
inline void exp_many(const double* x, double* y, std::size_t n) { active().exp_many(x, y, n); }
inline void sigmoid_many(const double* x, double* y, std::size_t n) { active().sigmoid_many(x, y, n); }
inline void softplus_many(const double* x, double* y, std::size_t n) { active().softplus_many(x, y, n); }

/// y = M x, one dispatched dot per row.
inline void matvec(const Mat& m, const double* x, double* y) {
    for (std::size_t r = 0; r < m.rows; ++r) y[r] = dot(m.row(r), x, m.cols);
}

}  // namespace ifsr::kern
