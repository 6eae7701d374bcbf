#include <cmath>

#include "ifsr/kernels.hpp"

namespace ifsr::kern {
namespace {

double scalar_dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double scalar_dot_sq(const double* a, const double* w, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * a[i] * w[i];
    return acc;
}

double scalar_sum(const double* a, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

void scalar_axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scalar_exp_many(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

void scalar_sigmoid_many(const double* x, double* y, std::size_t n) {
    // Lower half plus once-rounded complement; keeps q(x) + q(-x) == 1 exact.
    for (std::size_t i = 0; i < n; ++i) {
        const double t = std::exp(-std::fabs(x[i]));
        const double q = t / (1.0 + t);
        y[i] = x[i] >= 0.0 ? 1.0 - q : q;
    }
}

void scalar_softplus_many(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = x[i];
        y[i] = (xi > 0.0 ? xi : 0.0) + std::log1p(std::exp(-std::fabs(xi)));
    }
}

const Kernels table = {
    "scalar",        scalar_dot,          scalar_dot_sq,
    scalar_sum,      scalar_axpy,         scalar_exp_many,
    scalar_sigmoid_many, scalar_softplus_many,
};

}  // namespace

const Kernels& scalar_kernels() { return table; }

}  // namespace ifsr::kern
