#include <doctest.h>

#include <cmath>

#include "ifsr/rng.hpp"
#include "ifsr/stats.hpp"

using namespace ifsr;
using namespace ifsr::stats;

TEST_CASE("student-t cdf against closed forms") {
    CHECK(t_cdf(0.0, 5) == 0.5);
    // nu = 1 is Cauchy: F(t) = 1/2 + atan(t)/pi
    for (double t : {-3.0, -1.0, 0.5, 1.0, 4.0}) {
        CHECK(t_cdf(t, 1) == doctest::Approx(0.5 + std::atan(t) / M_PI).epsilon(1e-10));
        // nu = 2: F(t) = 1/2 + t / (2 sqrt(2 + t^2))
        CHECK(t_cdf(t, 2) ==
              doctest::Approx(0.5 + t / (2.0 * std::sqrt(2.0 + t * t))).epsilon(1e-10));
    }
    CHECK(t_cdf(3.0, 50) + t_cdf(-3.0, 50) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("t quantiles match the classic table") {
    CHECK(t_quantile_975(1) == doctest::Approx(12.706).epsilon(1e-3));
    CHECK(t_quantile_975(2) == doctest::Approx(4.3027).epsilon(1e-3));
    CHECK(t_quantile_975(4) == doctest::Approx(2.7764).epsilon(1e-3));
    CHECK(t_quantile_975(9) == doctest::Approx(2.2622).epsilon(1e-3));
    CHECK(t_quantile_975(29) == doctest::Approx(2.0452).epsilon(1e-3));
}

TEST_CASE("moments") {
    std::vector<double> xs = {1.0, 2.0, 3.0, 4.0};
    CHECK(mean(xs) == 2.5);
    CHECK(sample_sd(xs) == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-14));
    CHECK(sample_sd({7.0}) == 0.0);
}

TEST_CASE("paired t-test") {
    // strong consistent improvement -> small p
    std::vector<double> a = {1.1, 1.2, 1.15, 1.3, 1.25, 1.18, 1.22, 1.27, 1.12, 1.21};
    std::vector<double> b = {1.0, 1.05, 1.02, 1.1, 1.08, 1.0, 1.04, 1.09, 1.01, 1.03};
    CHECK(paired_t_p_greater(a, b) < 0.001);
    CHECK(paired_t_p_greater(b, a) > 0.999);

    // symmetric noise -> p near 0.5 on average; single check with a fixed draw
    Rng rng(3);
    std::vector<double> x(10), y(10);
    for (std::size_t i = 0; i < 10; ++i) {
        x[i] = rng.normal(0.0, 1.0);
        y[i] = x[i] + rng.normal(0.0, 1e-3);
    }
    const double p = paired_t_p_greater(x, y);
    CHECK(p > 0.01);
    CHECK(p < 0.99);
}

TEST_CASE("confidence interval width") {
    std::vector<double> xs = {2.0, 2.1, 1.9, 2.05, 1.95};
    const double hw = ci95_half_width(xs);
    CHECK(hw == doctest::Approx(t_quantile_975(4) * sample_sd(xs) / std::sqrt(5.0)).epsilon(1e-12));
    CHECK(ci95_half_width({1.0}) == 0.0);
}
