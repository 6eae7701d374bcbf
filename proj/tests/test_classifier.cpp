#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ifsr/classifier.hpp"
#include "ifsr/gradcheck.hpp"
#include "ifsr/probit.hpp"
#include "ifsr/rng.hpp"

using namespace ifsr;
using namespace ifsr::cls;

namespace {

// rho value whose softplus is the requested variance
double rho_for(double sigma2) { return std::log(std::exp(sigma2) - 1.0); }

ClassWeightPosterior random_posterior(Rng& rng, std::size_t c, std::size_t d) {
    ClassWeightPosterior post;
    post.mu = Mat(c, d);
    post.rho = Mat(c, d);
    post.has_var.assign(c, 1);
    for (auto& x : post.mu.v) x = rng.normal(0.0, 0.7);
    for (auto& x : post.rho.v) x = rng.uniform(-1.5, 1.5);
    return post;
}

Batch random_batch(Rng& rng, std::size_t n, std::size_t d, int classes) {
    Batch b;
    b.features = Mat(n, d);
    for (auto& x : b.features.v) x = rng.normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) b.features.at(i, d - 1) = 1.0;  // bias channel
    b.labels.resize(n);
    for (auto& l : b.labels) l = static_cast<int>(rng.below(classes + 1)) - 1;
    return b;
}

}  // namespace

TEST_CASE("point classifier scores") {
    PointClassifier clf;
    clf.W = Mat(3, 4);
    Feature f = {0.3, -1.0, 0.25, 1.0};

    auto scores = class_scores_point(f, clf);
    for (double s : scores) CHECK(s == 0.5);

    clf.W.at(1, 3) = 3.0;  // bias weight only
    Feature f_bias = {0.0, 0.0, 0.0, 1.0};
    scores = class_scores_point(f_bias, clf);
    CHECK(scores[1] == probit::sigmoid(3.0));
    CHECK(scores[0] == 0.5);

    // permuting other rows leaves a class's score bit-identical
    PointClassifier swapped = clf;
    for (std::size_t j = 0; j < 4; ++j) std::swap(swapped.W.at(0, j), swapped.W.at(2, j));
    CHECK(class_scores_point(f, swapped)[1] == class_scores_point(f, clf)[1]);

    Feature bad = {1.0, 2.0};
    CHECK_THROWS_AS(class_scores_point(bad, clf), std::invalid_argument);
}

TEST_CASE("probit classifier scores") {
    Rng rng(31);
    const std::size_t d = 6;
    auto post = random_posterior(rng, 3, d);
    Feature f(d, 0.0);
    for (auto& x : f) x = rng.normal(0.0, 1.0);
    f[d - 1] = 1.0;

    SUBCASE("vanishing variance reduces to the point classifier exactly") {
        auto tiny = post;
        tiny.rho.fill(-40.0);  // softplus(-40) ~ 4e-18, under the point-mass guard
        PointClassifier point{tiny.mu};
        auto a = class_scores_probit(f, tiny);
        auto b = class_scores_point(f, point);
        for (std::size_t c = 0; c < a.size(); ++c) CHECK(a[c] == b[c]);

        auto flagged = post;
        flagged.has_var.assign(3, 0);
        auto c2 = class_scores_probit(f, flagged);
        PointClassifier point2{flagged.mu};
        auto b2 = class_scores_point(f, point2);
        for (std::size_t c = 0; c < c2.size(); ++c) CHECK(c2[c] == b2[c]);
    }

    SUBCASE("unit example matches the oracle") {
        ClassWeightPosterior unit;
        unit.mu = Mat(1, d);
        unit.rho = Mat(1, d);
        unit.has_var.assign(1, 1);
        for (std::size_t j = 0; j < d; ++j) {
            unit.mu.at(0, j) = 1.0;
            unit.rho.at(0, j) = rho_for(1.0);
        }
        Feature e1(d, 0.0);
        e1[0] = 1.0;
        const double score = class_scores_probit(e1, unit)[0];
        CHECK(score == doctest::Approx(0.700).epsilon(2e-3));
        CHECK(std::fabs(score - probit::predictive_quadrature({1.0, 1.0})) <= 0.02);
    }

    SUBCASE("inflating the variance pulls positive scores toward 1/2") {
        ClassWeightPosterior wide = post;
        for (auto& r : wide.rho.v) r = rho_for(2.0 * probit::softplus(r));
        auto base = class_scores_probit(f, post);
        auto inflated = class_scores_probit(f, wide);
        for (std::size_t c = 0; c < base.size(); ++c) {
            if (base[c] > 0.5 + 1e-9)
                CHECK(inflated[c] < base[c]);
            else if (base[c] < 0.5 - 1e-9)
                CHECK(inflated[c] > base[c]);
        }
    }

    SUBCASE("per-class independence: deleting a row leaves others bit-identical") {
        auto full = class_scores_probit(f, post);
        ClassWeightPosterior reduced;
        reduced.mu = Mat(2, d);
        reduced.rho = Mat(2, d);
        reduced.has_var.assign(2, 1);
        // drop class 1
        for (std::size_t j = 0; j < d; ++j) {
            reduced.mu.at(0, j) = post.mu.at(0, j);
            reduced.rho.at(0, j) = post.rho.at(0, j);
            reduced.mu.at(1, j) = post.mu.at(2, j);
            reduced.rho.at(1, j) = post.rho.at(2, j);
        }
        auto part = class_scores_probit(f, reduced);
        CHECK(part[0] == full[0]);
        CHECK(part[1] == full[2]);
    }
}

TEST_CASE("focal loss") {
    const FocalParams fp;  // gamma 2, alpha 0.25
    CHECK(focal_loss(1.0 - 1e-7, true, fp) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(focal_loss(1.0 - 1e-9, true, fp) < 1e-12);

    // 0.25 * (1-0.5)^2 * ln 2
    CHECK(focal_loss(0.5, true, fp) ==
          doctest::Approx(0.25 * 0.25 * std::numbers::ln2).epsilon(1e-14));

    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const double p1 = rng.uniform(0.01, 0.99);
        const double p2 = rng.uniform(0.01, 0.99);
        const double lo = std::min(p1, p2), hi = std::max(p1, p2);
        CHECK(focal_loss(lo, true, fp) >= focal_loss(hi, true, fp));
        CHECK(focal_loss(hi, false, fp) >= focal_loss(lo, false, fp));
    }

    // derivative against central differences
    for (int i = 0; i < 50; ++i) {
        const double p = rng.uniform(0.05, 0.95);
        const bool y = rng.below(2) == 0;
        const double h = 1e-7;
        const double num = (focal_loss(p + h, y, fp) - focal_loss(p - h, y, fp)) / (2 * h);
        CHECK(focal_loss_dp(p, y, fp) == doctest::Approx(num).epsilon(1e-5));
    }
}

TEST_CASE("kl divergence of the diagonal posterior") {
    ClassWeightPosterior post;
    post.mu = Mat(1, 1);
    post.rho = Mat(1, 1);
    post.has_var.assign(1, 1);

    post.mu.at(0, 0) = 0.0;
    post.rho.at(0, 0) = rho_for(1.0);
    CHECK(std::fabs(kl_diag_gaussian(post)) < 1e-15);

    post.mu.at(0, 0) = 0.5;
    CHECK(kl_diag_gaussian(post) == doctest::Approx(0.125).epsilon(1e-12));

    post.mu.at(0, 0) = 0.0;
    post.rho.at(0, 0) = rho_for(std::numbers::e);
    const double kl = kl_diag_gaussian(post);
    CHECK(kl == doctest::Approx((std::numbers::e - 2.0) / 2.0).epsilon(1e-12));

    // numeric-integration oracle: KL = int q ln(q/p), q = N(0, e), p = N(0, 1)
    const double s2 = std::numbers::e;
    auto integrand = [&](double x) {
        const double q = std::exp(-0.5 * x * x / s2) / std::sqrt(2.0 * std::numbers::pi * s2);
        const double lr = -0.5 * x * x / s2 - 0.5 * std::log(s2) + 0.5 * x * x;
        return q * lr;
    };
    const double lim = 12.0 * std::sqrt(s2);
    const int n = 200000;
    double simpson = integrand(-lim) + integrand(lim);
    for (int i = 1; i < n; ++i)
        simpson += integrand(-lim + 2.0 * lim * i / n) * (i % 2 ? 4.0 : 2.0);
    simpson *= (2.0 * lim / n) / 3.0;
    CHECK(kl == doctest::Approx(simpson).epsilon(1e-9));

    // non-negativity over random posteriors, zero only at (0, 1)
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        post.mu.at(0, 0) = rng.normal(0.0, 1.0);
        post.rho.at(0, 0) = rng.uniform(-2.0, 2.0);
        CHECK(kl_diag_gaussian(post) >= 0.0);
        if (std::fabs(post.mu.at(0, 0)) > 1e-3 || std::fabs(probit::softplus(post.rho.at(0, 0)) - 1.0) > 1e-3)
            CHECK(kl_diag_gaussian(post) > 0.0);
    }
}

TEST_CASE("classifier loss composition") {
    Rng rng(11);
    const std::size_t d = 5;
    auto post = random_posterior(rng, 2, d);
    auto batch = random_batch(rng, 6, d, 2);
    const FocalParams fp;

    CHECK_THROWS_AS(loss_classifier(Batch{}, post, 0.1, fp), std::invalid_argument);

    // recomposition oracle: mean focal + w * KL computed independently
    double focal_sum = 0.0;
    for (std::size_t i = 0; i < batch.features.rows; ++i) {
        Feature f(batch.features.row(i), batch.features.row(i) + d);
        auto scores = class_scores_probit(f, post);
        for (std::size_t c = 0; c < scores.size(); ++c)
            focal_sum += focal_loss(scores[c], batch.labels[i] == (int)c, fp);
    }
    const double focal_mean = focal_sum / (batch.features.rows * 2.0);
    const double w = 0.37;
    CHECK(std::fabs(loss_classifier(batch, post, w, fp) -
                    (focal_mean + w * kl_diag_gaussian(post))) < 1e-10);
    CHECK(std::fabs(loss_classifier(batch, post, 0.0, fp) - focal_mean) < 1e-10);
}

TEST_CASE("classifier gradients match finite differences") {
    const FocalParams fp;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        const std::size_t d = 4, c = 2, n = 6;
        auto post = random_posterior(rng, c, d);
        auto batch = random_batch(rng, n, d, c);
        const double w = 1.0 / 6.0;

        PosteriorGrads grads;
        grad_loss_classifier(batch, post, w, fp, &grads);

        auto loss_mu = [&] { return loss_classifier(batch, post, w, fp); };
        auto r1 = gradcheck::fd_check(post.mu.v.data(), post.mu.size(), grads.mu.v.data(), loss_mu);
        CHECK(r1.max_rel <= 1e-4);
        auto r2 = gradcheck::fd_check(post.rho.v.data(), post.rho.size(), grads.rho.v.data(), loss_mu);
        CHECK(r2.max_rel <= 1e-4);
    }
}

TEST_CASE("classifier gradient edge cases") {
    const FocalParams fp;
    const std::size_t d = 3;

    SUBCASE("saturated correct predictions are a stationary point") {
        ClassWeightPosterior post;
        post.mu = Mat(2, d);
        post.rho = Mat(2, d);
        post.has_var.assign(2, 1);
        post.rho.fill(rho_for(1.0));
        post.mu.at(0, d - 1) = 1e4;   // class 0 everywhere positive
        post.mu.at(1, d - 1) = -1e4;  // class 1 everywhere negative
        Batch batch;
        batch.features = Mat(2, d);
        batch.features.at(0, d - 1) = 1.0;
        batch.features.at(1, d - 1) = 1.0;
        batch.labels = {0, 0};

        PosteriorGrads grads;
        const double loss = grad_loss_classifier(batch, post, 0.0, fp, &grads);
        CHECK(loss < 1e-10);
        double norm = 0.0;
        for (double g : grads.mu.v) norm += g * g;
        for (double g : grads.rho.v) norm += g * g;
        CHECK(std::sqrt(norm) < 1e-8);
    }

    SUBCASE("dead inputs give zero rho gradient") {
        Rng rng(3);
        auto post = random_posterior(rng, 2, d);
        Batch batch;
        batch.features = Mat(4, d);  // all-zero features
        batch.labels = {0, 1, -1, 0};
        PosteriorGrads grads;
        grad_loss_classifier(batch, post, 0.0, fp, &grads);
        for (double g : grads.rho.v) CHECK(g == 0.0);
    }
}

TEST_CASE("point classifier gradient matches finite differences") {
    const FocalParams fp;
    for (std::uint64_t seed = 21; seed <= 25; ++seed) {
        Rng rng(seed);
        const std::size_t d = 5, c = 3, n = 7;
        PointClassifier clf;
        clf.W = Mat(c, d);
        for (auto& x : clf.W.v) x = rng.normal(0.0, 0.8);
        auto batch = random_batch(rng, n, d, c);

        Mat gw;
        grad_loss_point(batch, clf, fp, &gw);
        auto loss = [&] { return loss_point(batch, clf, fp); };
        auto r = gradcheck::fd_check(clf.W.v.data(), clf.W.size(), gw.v.data(), loss);
        CHECK(r.max_rel <= 1e-4);
    }
}

TEST_CASE("softmax baseline") {
    const std::size_t d = 4;
    Mat w(4, d);  // 3 classes + background

    Feature f = {0.2, -0.4, 1.3, 1.0};
    auto probs = softmax_scores(f, w);
    for (double p : probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-14));

    // shift invariance: add a constant to every class's bias weight
    Rng rng(9);
    for (auto& x : w.v) x = rng.normal(0.0, 1.0);
    auto base = softmax_scores(f, w);
    Mat shifted = w;
    for (std::size_t c = 0; c < w.rows; ++c) shifted.at(c, d - 1) += 2.5;
    auto moved = softmax_scores(f, shifted);
    for (std::size_t c = 0; c < w.rows; ++c) CHECK(moved[c] == doctest::Approx(base[c]).epsilon(1e-12));

    // near-infinite correct logit saturates the loss at zero
    Mat hot(3, d);
    hot.at(1, d - 1) = 60.0;
    Batch one;
    one.features = Mat(1, d);
    one.features.at(0, d - 1) = 1.0;
    one.labels = {1};
    CHECK(softmax_ce_loss(one, hot, nullptr) < 1e-15);

    // gradients
    for (std::uint64_t seed = 31; seed <= 35; ++seed) {
        Rng r2(seed);
        Mat wr(3, d);
        for (auto& x : wr.v) x = r2.normal(0.0, 0.8);
        auto batch = random_batch(r2, 6, d, 2);  // labels in {-1, 0, 1}
        Mat gw;
        softmax_ce_loss(batch, wr, &gw);
        auto loss = [&] { return softmax_ce_loss(batch, wr, nullptr); };
        auto res = gradcheck::fd_check(wr.v.data(), wr.size(), gw.v.data(), loss);
        CHECK(res.max_rel <= 1e-4);
    }
}
