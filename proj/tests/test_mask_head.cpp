#include <doctest.h>

#include <cmath>

#include "ifsr/gradcheck.hpp"
#include "ifsr/mask_head.hpp"
#include "ifsr/rng.hpp"

using namespace ifsr;
using namespace ifsr::mask;

namespace {

Mat random_cells(Rng& rng, std::size_t g, std::size_t d) {
    Mat cells(g * g, d);
    for (auto& x : cells.v) x = rng.normal(0.0, 1.0);
    for (std::size_t i = 0; i < cells.rows; ++i) cells.at(i, d - 1) = 1.0;
    return cells;
}

}  // namespace

TEST_CASE("mask logits") {
    const std::size_t g = 4, d = 5;
    MaskHeadParams params;
    params.W = Mat(2, d);
    Rng rng(3);
    auto cells = random_cells(rng, g, d);

    auto zero = mask_logits(cells, 0, params);
    for (double v : zero.v) CHECK(v == 0.0);
    for (double p : mask_probs(zero).v) CHECK(p == 0.5);

    for (auto& x : params.W.v) x = rng.normal(0.0, 1.0);
    auto base = mask_logits(cells, 1, params);

    SUBCASE("permuting cells permutes outputs identically") {
        Mat swapped = cells;
        for (std::size_t j = 0; j < d; ++j) std::swap(swapped.at(2, j), swapped.at(9, j));
        auto out = mask_logits(swapped, 1, params);
        CHECK(out.v[2] == base.v[9]);
        CHECK(out.v[9] == base.v[2]);
        for (std::size_t i = 0; i < out.size(); ++i)
            if (i != 2 && i != 9) CHECK(out.v[i] == base.v[i]);
    }

    SUBCASE("single-cell change is local") {
        Mat poked = cells;
        poked.at(7, 0) += 1.0;
        auto out = mask_logits(poked, 1, params);
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (i == 7)
                CHECK(out.v[i] != base.v[i]);
            else
                CHECK(out.v[i] == base.v[i]);
        }
    }

    CHECK_THROWS_AS(mask_logits(cells, 5, params), std::invalid_argument);
}

TEST_CASE("mask BCE") {
    const std::size_t g = 3;
    Mat gt(g, g);
    gt.v = {1, 0, 1, 0, 0, 1, 1, 1, 0};

    Mat perfect = gt;  // probabilities equal to targets; clamp keeps it finite
    CHECK(mask_bce_loss(perfect, gt) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(mask_bce_loss(perfect, gt) < 1e-6);

    Mat half(g, g);
    half.fill(0.5);
    CHECK(mask_bce_loss(half, gt) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    // recomposition oracle: independently coded per-cell sum / G^2
    Rng rng(5);
    Mat probs(g, g);
    for (auto& p : probs.v) p = rng.uniform(0.01, 0.99);
    double manual = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        manual += -(gt.v[i] * std::log(probs.v[i]) + (1.0 - gt.v[i]) * std::log(1.0 - probs.v[i]));
    manual /= static_cast<double>(g * g);
    CHECK(std::fabs(mask_bce_loss(probs, gt) - manual) < 1e-10);

    Mat wrong(2, 2);
    CHECK_THROWS_AS(mask_bce_loss(wrong, gt), std::invalid_argument);

    SUBCASE("per-cell BCE is minimized at the empirical foreground frequency") {
        // one cell, three training targets {1, 1, 0}
        auto mean_bce = [](double p) { return (-2.0 * std::log(p) - std::log(1.0 - p)) / 3.0; };
        double best = 0.5, best_v = mean_bce(0.5);
        for (double p = 0.01; p < 0.995; p += 0.0001) {
            if (mean_bce(p) < best_v) {
                best_v = mean_bce(p);
                best = p;
            }
        }
        CHECK(best == doctest::Approx(2.0 / 3.0).epsilon(1e-3));
    }
}

TEST_CASE("binarize") {
    Mat half(2, 2);
    half.fill(0.5);
    for (double v : binarize(half).v) CHECK(v == 1.0);  // >= convention

    Mat low(2, 2);
    low.fill(0.49);
    for (double v : binarize(low).v) CHECK(v == 0.0);

    Mat bits(2, 2);
    bits.v = {1, 0, 0, 1};
    auto once = binarize(bits);
    auto twice = binarize(once);
    for (std::size_t i = 0; i < 4; ++i) CHECK(once.v[i] == twice.v[i]);
}

TEST_CASE("mask gradient matches finite differences and is cell-separable") {
    const std::size_t g = 4, d = 5;
    for (std::uint64_t seed = 51; seed <= 55; ++seed) {
        Rng rng(seed);
        auto cells = random_cells(rng, g, d);
        Mat gt(g, g);
        for (auto& y : gt.v) y = rng.below(2) ? 1.0 : 0.0;
        std::vector<double> w(d);
        for (auto& x : w) x = rng.normal(0.0, 0.7);

        std::vector<double> grad(d, 0.0);
        mask_bce_grad(cells, gt, w.data(), d, grad.data());
        auto loss = [&] { return mask_bce_grad(cells, gt, w.data(), d, nullptr); };
        auto r = gradcheck::fd_check(w.data(), d, grad.data(), loss);
        CHECK(r.max_rel <= 1e-4);

        // the gradient is a sum of independent per-cell terms
        std::vector<double> sum(d, 0.0);
        for (std::size_t i = 0; i < cells.rows; ++i) {
            Mat one_cell(1, d);
            Mat one_gt(1, 1);
            std::copy(cells.row(i), cells.row(i) + d, one_cell.v.begin());
            one_gt.v[0] = gt.v[i];
            std::vector<double> gcell(d, 0.0);
            mask_bce_grad(one_cell, one_gt, w.data(), d, gcell.data());
            for (std::size_t j = 0; j < d; ++j) sum[j] += gcell[j] / static_cast<double>(g * g);
        }
        for (std::size_t j = 0; j < d; ++j) CHECK(grad[j] == doctest::Approx(sum[j]).epsilon(1e-10));
    }
}
