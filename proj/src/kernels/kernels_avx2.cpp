// AVX2 variants of the inner-loop kernels. Compiled only when the compiler
// supports -mavx2 -mfma; callers must check avx2_supported() before use.
#if defined(IFSR_HAVE_AVX2)

#include <immintrin.h>

#include <cmath>

#include "ifsr/kernels.hpp"

namespace ifsr::kern {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d h = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, h));
}

// 2^k for integer lanes k in [-1022, 1023], via exponent-field construction.
inline __m256d pow2i(__m128i k32) {
    __m256i k64 = _mm256_cvtepi32_epi64(k32);
    __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(k64, _mm256_set1_epi64x(1023)), 52);
    return _mm256_castsi256_pd(bits);
}

// exp(x) = 2^n * P(r), x = n*ln2 + r, |r| <= ln2/2, P = Taylor to r^14/14!.
// The 2^n scaling is applied in two halves so subnormal results stay exact.
inline __m256d vexp(__m256d x) {
    const __m256d log2e = _mm256_set1_pd(1.44269504088896340736);
    const __m256d ln2_hi = _mm256_set1_pd(6.93147180369123816490e-01);
    const __m256d ln2_lo = _mm256_set1_pd(1.90821492927058770002e-10);

    const __m256d x_in = x;
    x = _mm256_min_pd(x, _mm256_set1_pd(709.0));
    x = _mm256_max_pd(x, _mm256_set1_pd(-745.0));

    const __m256d nf =
        _mm256_round_pd(_mm256_mul_pd(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(nf, ln2_hi, x);
    r = _mm256_fnmadd_pd(nf, ln2_lo, r);

    __m256d p = _mm256_set1_pd(1.0 / 87178291200.0);  // 1/14!
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 6227020800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 479001600.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 39916800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 3628800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 362880.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 40320.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 5040.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 720.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 120.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 24.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 6.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(0.5));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0));

    const __m128i n32 = _mm256_cvtpd_epi32(nf);
    const __m128i n1 = _mm_srai_epi32(n32, 1);
    const __m128i n2 = _mm_sub_epi32(n32, n1);
    __m256d r2 = _mm256_mul_pd(_mm256_mul_pd(p, pow2i(n1)), pow2i(n2));

    // saturate outside the finite range, matching std::exp
    const __m256d over = _mm256_cmp_pd(x_in, _mm256_set1_pd(709.0), _CMP_GT_OQ);
    const __m256d under = _mm256_cmp_pd(x_in, _mm256_set1_pd(-745.0), _CMP_LT_OQ);
    r2 = _mm256_blendv_pd(r2, _mm256_set1_pd(HUGE_VAL), over);
    r2 = _mm256_blendv_pd(r2, _mm256_setzero_pd(), under);
    return r2;
}

// log1p(w) for w in (0, 1]: 2*atanh(s), s = w/(2+w), |s| <= 1/3.
// Odd series in s with reciprocal-odd coefficients; exact for tiny w.
inline __m256d vlog1p01(__m256d w) {
    const __m256d s = _mm256_div_pd(w, _mm256_add_pd(w, _mm256_set1_pd(2.0)));
    const __m256d s2 = _mm256_mul_pd(s, s);
    __m256d p = _mm256_set1_pd(1.0 / 33.0);
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 31.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 29.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 27.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 25.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 23.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 21.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 19.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 17.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 15.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 13.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 11.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 9.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 7.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 5.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / 3.0));
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0));
    return _mm256_mul_pd(_mm256_add_pd(s, s), p);
}

double avx2_dot(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double avx2_dot_sq(const double* a, const double* w, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d av = _mm256_loadu_pd(a + i);
        acc0 = _mm256_fmadd_pd(_mm256_mul_pd(av, av), _mm256_loadu_pd(w + i), acc0);
    }
    double acc = hsum(acc0);
    for (; i < n; ++i) acc += a[i] * a[i] * w[i];
    return acc;
}

double avx2_sum(const double* a, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(a + i));
    double acc = hsum(acc0);
    for (; i < n; ++i) acc += a[i];
    return acc;
}

void avx2_axpy(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void avx2_exp_many(const double* x, double* y, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(y + i, vexp(_mm256_loadu_pd(x + i)));
    for (; i < n; ++i) y[i] = std::exp(x[i]);
}

void avx2_sigmoid_many(const double* x, double* y, std::size_t n) {
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d sign_mask = _mm256_set1_pd(-0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xv = _mm256_loadu_pd(x + i);
        const __m256d t = vexp(_mm256_sub_pd(_mm256_setzero_pd(), _mm256_andnot_pd(sign_mask, xv)));
        const __m256d q = _mm256_div_pd(t, _mm256_add_pd(one, t));
        const __m256d pos = _mm256_sub_pd(one, q);
        const __m256d ge = _mm256_cmp_pd(xv, _mm256_setzero_pd(), _CMP_GE_OQ);
        _mm256_storeu_pd(y + i, _mm256_blendv_pd(q, pos, ge));
    }
    for (; i < n; ++i) {
        const double t = std::exp(-std::fabs(x[i]));
        const double q = t / (1.0 + t);
        y[i] = x[i] >= 0.0 ? 1.0 - q : q;
    }
}

void avx2_softplus_many(const double* x, double* y, std::size_t n) {
    const __m256d sign_mask = _mm256_set1_pd(-0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xv = _mm256_loadu_pd(x + i);
        const __m256d t = vexp(_mm256_sub_pd(_mm256_setzero_pd(), _mm256_andnot_pd(sign_mask, xv)));
        const __m256d relu = _mm256_max_pd(xv, _mm256_setzero_pd());
        _mm256_storeu_pd(y + i, _mm256_add_pd(relu, vlog1p01(t)));
    }
    for (; i < n; ++i) {
        const double xi = x[i];
        y[i] = (xi > 0.0 ? xi : 0.0) + std::log1p(std::exp(-std::fabs(xi)));
    }
}

const Kernels table = {
    "avx2",        avx2_dot,          avx2_dot_sq,
    avx2_sum,      avx2_axpy,         avx2_exp_many,
    avx2_sigmoid_many, avx2_softplus_many,
};

}  // namespace

const Kernels& avx2_kernels() { return table; }

}  // namespace ifsr::kern

#endif  // IFSR_HAVE_AVX2
