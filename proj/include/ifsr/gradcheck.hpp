#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace ifsr::gradcheck {

struct Result {
    double max_rel = 0.0;
    std::size_t worst = 0;
    double analytic = 0.0;
    double numeric = 0.0;

    bool ok(double tol = 1e-4) const { return max_rel <= tol; }
};

/// Central-difference check of an analytic gradient. `loss` must re-evaluate
/// the objective from the (mutated) parameters on every call. The error is
/// relative with a 1e-2 floor, far above the ~1e-10 noise of double-precision
/// central differences at h = 1e-5.
template <typename LossFn>
Result fd_check(double* params, std::size_t n, const double* analytic, LossFn&& loss,
                double h = 1e-5) {
    Result r;
    for (std::size_t i = 0; i < n; ++i) {
        const double orig = params[i];
        params[i] = orig + h;
        const double fp = loss();
        params[i] = orig - h;
        const double fm = loss();
        params[i] = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double denom = std::max({1e-2, std::fabs(num), std::fabs(analytic[i])});
        const double rel = std::fabs(num - analytic[i]) / denom;
        if (rel > r.max_rel) {
            r.max_rel = rel;
            r.worst = i;
            r.analytic = analytic[i];
            r.numeric = num;
        }
    }
    return r;
}

}  // namespace ifsr::gradcheck
