#include "ifsr/stats.hpp"

#include <cmath>

#include "ifsr/common.hpp"

namespace ifsr::stats {
namespace {

// regularized incomplete beta via the continued fraction (modified Lentz)
double betacf(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 3e-16;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double mean(const std::vector<double>& xs) {
    require(!xs.empty(), "mean: empty sample");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double sample_sd(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

double t_cdf(double t, std::size_t nu) {
    require(nu >= 1, "t_cdf: needs at least one degree of freedom");
    if (t == 0.0) return 0.5;
    const double n = static_cast<double>(nu);
    const double x = n / (n + t * t);
    const double tail = 0.5 * inc_beta(n / 2.0, 0.5, x);
    return t > 0.0 ? 1.0 - tail : tail;
}

double t_quantile_975(std::size_t nu) {
    double lo = 0.0, hi = 200.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (t_cdf(mid, nu) < 0.975)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

double paired_t_p_greater(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "paired_t_p_greater: unpaired samples");
    if (a.size() < 2) return 1.0;
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double sd = sample_sd(d);
    const double m = mean(d);
    if (sd == 0.0) return m > 0.0 ? 0.0 : 1.0;
    const double t = m / (sd / std::sqrt(static_cast<double>(d.size())));
    return 1.0 - t_cdf(t, d.size() - 1);
}

double ci95_half_width(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    return t_quantile_975(xs.size() - 1) * sample_sd(xs) / std::sqrt(static_cast<double>(xs.size()));
}

}  // namespace ifsr::stats
