#pragma once

#include <cstddef>
#include <vector>

namespace ifsr::stats {

double mean(const std::vector<double>& xs);
/// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
double sample_sd(const std::vector<double>& xs);

/// CDF of Student's t with nu degrees of freedom.
double t_cdf(double t, std::size_t nu);
/// Two-sided 95% quantile, t such that P(|T| <= t) = 0.95.
double t_quantile_975(std::size_t nu);

/// One-sided paired t-test of H1: mean(a - b) > 0. Returns the p-value;
/// 1.0 when there are fewer than two pairs or the differences are constant.
double paired_t_p_greater(const std::vector<double>& a, const std::vector<double>& b);

/// Half width of the 95% confidence interval of the mean.
double ci95_half_width(const std::vector<double>& xs);

}  // namespace ifsr::stats
