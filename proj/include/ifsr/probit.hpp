#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "ifsr/common.hpp"

namespace ifsr::probit {

/// Slope-matching constant: lambda^2 = pi/8 makes Phi(lambda*x) and the
/// logistic sigmoid agree in slope at the origin.
inline const double kLambda = std::sqrt(std::numbers::pi / 8.0);
inline constexpr double kLambdaSq = std::numbers::pi / 8.0;

/// Variances below this are treated as a point mass; keeps the closed form
/// free of division noise near zero.
inline constexpr double kVarEpsilon = 1e-12;

/// Pre-activation Gaussian of a = f'w: mean f'mu, variance f'Sigma f.
struct ActivationGaussian {
    double mean_a = 0.0;
    double var_a = 0.0;
};

/// Logistic sigmoid, stable for |x| up to ~1e3 (saturates, never overflows).
/// Computed from the lower half q = t/(1+t) and its complement so that
/// sigmoid(x) + sigmoid(-x) == 1.0 holds bit-exactly.
inline double sigmoid(double x) {
    const double t = std::exp(-std::fabs(x));
    const double q = t / (1.0 + t);
    return x >= 0.0 ? 1.0 - q : q;
}

/// softplus(x) = log(1 + e^x); its derivative is the sigmoid.
inline double softplus(double x) {
    return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

/// erf via Maclaurin series (|x| <= 3) and the optimally truncated asymptotic
/// erfc expansion (|x| > 3). Absolute error <= 1e-7 everywhere (in practice
/// ~5e-9 at the crossover; see test_probit.cpp).
double erf_approx(double x);

/// Phi(lambda x) = 0.5 * (1 + erf(lambda x / sqrt(2))).
double probit_approx(double x);

/// Closed-form approximation of the posterior predictive integral:
/// sigmoid(mean_a / sqrt(1 + (pi/8) var_a)). Rejects var_a < 0.
double predictive_probit(const ActivationGaussian& g);

/// Monte-Carlo estimate: mean of sigmoid over T draws a_t ~ N(mean_a, var_a).
/// Deterministic for a fixed seed. Rejects T = 0.
double predictive_mc(const ActivationGaussian& g, std::size_t samples, std::uint64_t seed);

/// Gauss-Hermite nodes/weights for integration against exp(-x^2).
struct GaussHermite {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Computed by root bracketing on the orthonormal Hermite recurrence;
/// results are cached per order. order >= 1.
const GaussHermite& gauss_hermite(std::size_t order);

/// Gauss-Legendre nodes/weights on [-1, 1].
const GaussHermite& gauss_legendre(std::size_t order);

/// Deterministic evaluation of the exact posterior predictive integral; the
/// ground-truth oracle the probit and MC estimators are judged against.
///
/// The Heaviside part integrates in closed form, int H(a) N(a) da = Phi(mu/sd);
/// the exponentially damped remainder is integrated with composite
/// Gauss-Legendre panels no wider than one Gaussian standard deviation.
/// Absolute error stays below ~1e-12 for any variance (single-panel
/// Gauss-Hermite degrades to ~1e-4 by var_a = 25; the sigmoid's poles at
/// i*pi(2k+1) cap its rate). Rejects nodes < 32 and var_a < 0.
double predictive_quadrature(const ActivationGaussian& g, std::size_t nodes = 64);

}  // namespace ifsr::probit
