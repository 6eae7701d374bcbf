#pragma once

#include <string>
#include <vector>

namespace ifsr::checks {

struct CheckResult {
    std::string name;
    bool passed = false;
    double observed = 0.0;
    double bound = 0.0;
    std::string detail;
};

/// Closed-form probit vs quadrature oracle over the (mean, var) grid
/// [-6, 6] x [0, 10], step 0.25. csv_out, when non-empty, receives rows of
/// (mean_a, var_a, probit, mc, quadrature, abs_err).
CheckResult probit_oracle_sweep(const std::string& csv_out = "");

/// Analytic gradients vs central finite differences (h = 1e-5), 10 random
/// small instances per head; relative error bound 1e-4.
std::vector<CheckResult> gradient_checks();

/// average_precision vs the brute-force reference on random small scenes.
CheckResult evaluator_equivalence(std::size_t scenes = 50);

/// All of the above; used by the `check` subcommand.
std::vector<CheckResult> run_all(const std::string& csv_out = "");

}  // namespace ifsr::checks
