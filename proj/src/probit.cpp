#include "ifsr/probit.hpp"

#include <map>
#include <mutex>

#include "ifsr/kernels.hpp"
#include "ifsr/rng.hpp"

namespace ifsr::probit {
namespace {

constexpr double kSqrtPi = 1.7724538509055160273;
constexpr double kTwoOverSqrtPi = 1.1283791670955125739;

// Maclaurin series of erf, converges fast for |x| <= 3.
double erf_series(double x) {
    const double x2 = x * x;
    double term = x;  // x^(2k+1) / k!
    double sum = x;
    for (int k = 1; k < 80; ++k) {
        term *= -x2 / k;
        const double add = term / (2 * k + 1);
        sum += add;
        if (std::fabs(add) < 1e-18) break;
    }
    return kTwoOverSqrtPi * sum;
}

// Asymptotic expansion of erfc for x > 3, truncated at the smallest term.
double erfc_asymptotic(double x) {
    const double inv2x2 = 1.0 / (2.0 * x * x);
    double term = 1.0;
    double sum = 1.0;
    for (int k = 1; k < 40; ++k) {
        const double next = term * -(2 * k - 1) * inv2x2;
        if (std::fabs(next) >= std::fabs(term)) break;  // series started diverging
        term = next;
        sum += term;
        if (std::fabs(term) < 1e-18) break;
    }
    return std::exp(-x * x) / (x * kSqrtPi) * sum;
}

}  // namespace

double erf_approx(double x) {
    const double ax = std::fabs(x);
    double r;
    if (ax <= 3.0) {
        r = erf_series(ax);
    } else {
        r = 1.0 - erfc_asymptotic(ax);
    }
    return x < 0.0 ? -r : r;
}

double probit_approx(double x) {
    return 0.5 * (1.0 + erf_approx(kLambda * x * std::numbers::sqrt2 / 2.0));
}

double predictive_probit(const ActivationGaussian& g) {
    require(std::isfinite(g.mean_a) && std::isfinite(g.var_a), "predictive_probit: non-finite input");
    require(g.var_a >= 0.0, "predictive_probit: negative variance");
    if (g.var_a <= kVarEpsilon) return sigmoid(g.mean_a);
    return sigmoid(g.mean_a / std::sqrt(1.0 + kLambdaSq * g.var_a));
}

double predictive_mc(const ActivationGaussian& g, std::size_t samples, std::uint64_t seed) {
    require(samples >= 1, "predictive_mc: samples must be >= 1");
    require(g.var_a >= 0.0, "predictive_mc: negative variance");
    if (g.var_a <= kVarEpsilon) return sigmoid(g.mean_a);

    const double sd = std::sqrt(g.var_a);
    Rng rng(seed);
    constexpr std::size_t kChunk = 4096;
    double draws[kChunk];
    double probs[kChunk];
    double total = 0.0;
    std::size_t left = samples;
    while (left > 0) {
        const std::size_t n = left < kChunk ? left : kChunk;
        for (std::size_t i = 0; i < n; ++i) draws[i] = g.mean_a + sd * rng.normal();
        kern::sigmoid_many(draws, probs, n);
        total += kern::sum(probs, n);
        left -= n;
    }
    return total / static_cast<double>(samples);
}

namespace {

// Orthonormal Hermite value p_n(x) for weight exp(-x^2); stays O(1) for the
// orders we use, so no overflow handling is needed.
double hermite_orthonormal(std::size_t n, double x, double* prev_out = nullptr) {
    double pkm1 = 0.0;
    double pk = std::pow(std::numbers::pi, -0.25);
    for (std::size_t k = 0; k < n; ++k) {
        const double pkp1 =
            x * std::sqrt(2.0 / (k + 1)) * pk - std::sqrt(static_cast<double>(k) / (k + 1)) * pkm1;
        pkm1 = pk;
        pk = pkp1;
    }
    if (prev_out) *prev_out = pkm1;
    return pk;
}

GaussHermite build_gauss_hermite(std::size_t order) {
    // Roots of successive orthonormal Hermite polynomials interlace; grow the
    // root set order by order, bisecting each bracket then polishing by Newton.
    std::vector<double> roots{0.0};  // roots of p_1
    for (std::size_t n = 2; n <= order; ++n) {
        const double bound = std::sqrt(2.0 * n + 2.0);
        std::vector<double> brackets;
        brackets.push_back(-bound);
        for (double r : roots) brackets.push_back(r);
        brackets.push_back(bound);

        std::vector<double> next(n);
        for (std::size_t i = 0; i < n; ++i) {
            double lo = brackets[i], hi = brackets[i + 1];
            double flo = hermite_orthonormal(n, lo);
            for (int it = 0; it < 64; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double fmid = hermite_orthonormal(n, mid);
                if ((flo < 0.0) == (fmid < 0.0)) {
                    lo = mid;
                    flo = fmid;
                } else {
                    hi = mid;
                }
            }
            double x = 0.5 * (lo + hi);
            for (int it = 0; it < 4; ++it) {  // Newton polish: p_n' = sqrt(2n) p_{n-1}
                double pprev;
                const double pn = hermite_orthonormal(n, x, &pprev);
                const double dpn = std::sqrt(2.0 * n) * pprev;
                if (dpn == 0.0) break;
                x -= pn / dpn;
            }
            next[i] = x;
        }
        roots = std::move(next);
    }

    GaussHermite gh;
    gh.nodes = roots;
    gh.weights.resize(order);
    for (std::size_t i = 0; i < order; ++i) {
        // Christoffel number: w_i = 1 / sum_{k<n} p_k(x_i)^2.
        double x = gh.nodes[i];
        double pkm1 = 0.0;
        double pk = std::pow(std::numbers::pi, -0.25);
        double ssq = pk * pk;
        for (std::size_t k = 0; k + 1 < order; ++k) {
            const double pkp1 =
                x * std::sqrt(2.0 / (k + 1)) * pk - std::sqrt(static_cast<double>(k) / (k + 1)) * pkm1;
            pkm1 = pk;
            pk = pkp1;
            ssq += pk * pk;
        }
        gh.weights[i] = 1.0 / ssq;
    }
    return gh;
}

}  // namespace

namespace {

GaussHermite build_gauss_legendre(std::size_t order) {
    GaussHermite gl;
    gl.nodes.resize(order);
    gl.weights.resize(order);
    for (std::size_t i = 0; i < (order + 1) / 2; ++i) {
        // Newton from the classic cosine initial guess.
        double x = std::cos(std::numbers::pi * (i + 0.75) / (order + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (std::size_t k = 1; k < order; ++k) {
                const double p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
                p0 = p1;
                p1 = p2;
            }
            dp = order * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / dp;
            x -= dx;
            if (std::fabs(dx) < 1e-15) break;
        }
        gl.nodes[i] = -x;
        gl.nodes[order - 1 - i] = x;
        const double w = 2.0 / ((1.0 - x * x) * dp * dp);
        gl.weights[i] = w;
        gl.weights[order - 1 - i] = w;
    }
    return gl;
}

template <typename Build>
const GaussHermite& cached_rule(std::size_t order, std::map<std::size_t, GaussHermite>& cache,
                                std::mutex& mu, Build build) {
    std::scoped_lock lock(mu);
    auto it = cache.find(order);
    if (it == cache.end()) it = cache.emplace(order, build(order)).first;
    return it->second;
}

}  // namespace

const GaussHermite& gauss_hermite(std::size_t order) {
    require(order >= 1, "gauss_hermite: order must be >= 1");
    static std::mutex mu;
    static std::map<std::size_t, GaussHermite> cache;
    return cached_rule(order, cache, mu, build_gauss_hermite);
}

const GaussHermite& gauss_legendre(std::size_t order) {
    require(order >= 1, "gauss_legendre: order must be >= 1");
    static std::mutex mu;
    static std::map<std::size_t, GaussHermite> cache;
    return cached_rule(order, cache, mu, build_gauss_legendre);
}

double predictive_quadrature(const ActivationGaussian& g, std::size_t nodes) {
    require(nodes >= 32, "predictive_quadrature: nodes must be >= 32");
    require(std::isfinite(g.mean_a) && std::isfinite(g.var_a), "predictive_quadrature: non-finite input");
    require(g.var_a >= 0.0, "predictive_quadrature: negative variance");
    if (g.var_a <= kVarEpsilon) return sigmoid(g.mean_a);

    const double sd = std::sqrt(g.var_a);
    const double base = 0.5 * std::erfc(-g.mean_a / (sd * std::numbers::sqrt2));

    // remainder: - int_0^inf sigmoid(-t) [N(t|mu,v) - N(-t|mu,v)] dt,
    // nonzero only where the Gaussian mass and the e^-t factor overlap
    const double m = std::fabs(g.mean_a);
    const double t_lo = std::max(0.0, m - 12.0 * sd);
    const double t_hi = std::min(42.0, m + 12.0 * sd);
    if (t_lo >= t_hi) return base;

    const GaussHermite& gl = gauss_legendre(std::max<std::size_t>(8, nodes / 8));
    const double panel_w = std::min(1.5, sd);
    const std::size_t n_panels = static_cast<std::size_t>(std::ceil((t_hi - t_lo) / panel_w));
    const double inv_norm = 1.0 / (sd * std::sqrt(2.0 * std::numbers::pi));

    double acc = 0.0;
    for (std::size_t pi = 0; pi < n_panels; ++pi) {
        const double a0 = t_lo + (t_hi - t_lo) * static_cast<double>(pi) / n_panels;
        const double a1 = t_lo + (t_hi - t_lo) * static_cast<double>(pi + 1) / n_panels;
        const double mid = 0.5 * (a0 + a1);
        const double half = 0.5 * (a1 - a0);
        double panel = 0.0;
        for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
            const double t = mid + half * gl.nodes[i];
            const double zp = (t - g.mean_a) / sd;
            const double zm = (t + g.mean_a) / sd;
            const double gauss = (std::exp(-0.5 * zp * zp) - std::exp(-0.5 * zm * zm)) * inv_norm;
            panel += gl.weights[i] * sigmoid(-t) * gauss;
        }
        acc += half * panel;
    }
    return base - acc;
}

}  // namespace ifsr::probit
