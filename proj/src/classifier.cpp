#include "ifsr/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "ifsr/kernels.hpp"
#include "ifsr/probit.hpp"

namespace ifsr::cls {
namespace {

constexpr double kProbEps = 1e-7;

void check_dim(std::size_t fd, std::size_t wd, const char* who) {
    require(fd == wd, std::string(who) + ": feature dimension mismatch");
}

}  // namespace

std::vector<double> class_scores_point(const Feature& f, const PointClassifier& clf) {
    check_dim(f.size(), clf.W.cols, "class_scores_point");
    std::vector<double> scores(clf.W.rows);
    for (std::size_t c = 0; c < clf.W.rows; ++c)
        scores[c] = probit::sigmoid(kern::dot(f.data(), clf.W.row(c), f.size()));
    return scores;
}

std::vector<double> class_scores_probit(const Feature& f, const ClassWeightPosterior& post) {
    check_dim(f.size(), post.mu.cols, "class_scores_probit");
    const std::size_t d = f.size();
    std::vector<double> scores(post.classes());
    std::vector<double> sigma2(d);
    for (std::size_t c = 0; c < post.classes(); ++c) {
        const double mean_a = kern::dot(f.data(), post.mu.row(c), d);
        if (!post.row_has_var(c)) {
            // zero-variance row: same code path as the point classifier
            scores[c] = probit::sigmoid(mean_a);
            continue;
        }
        kern::softplus_many(post.rho.row(c), sigma2.data(), d);
        const double var_a = kern::dot_sq(f.data(), sigma2.data(), d);
        scores[c] = probit::predictive_probit({mean_a, var_a});
    }
    return scores;
}

double focal_loss(double p, bool y, const FocalParams& fp) {
    const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
    const double pt = y ? pc : 1.0 - pc;
    const double at = y ? fp.alpha : 1.0 - fp.alpha;
    return -at * std::pow(1.0 - pt, fp.gamma) * std::log(pt);
}

double focal_loss_dp(double p, bool y, const FocalParams& fp) {
    if (p < kProbEps || p > 1.0 - kProbEps) return 0.0;  // clamp region
    const double pt = y ? p : 1.0 - p;
    const double at = y ? fp.alpha : 1.0 - fp.alpha;
    const double one_m = 1.0 - pt;
    double d_dpt = -at * std::pow(one_m, fp.gamma) / pt;
    if (fp.gamma != 0.0) d_dpt += at * fp.gamma * std::pow(one_m, fp.gamma - 1.0) * std::log(pt);
    return y ? d_dpt : -d_dpt;
}

double kl_diag_gaussian(const ClassWeightPosterior& post) {
    double total = 0.0;
    std::vector<double> sigma2(post.dim());
    for (std::size_t c = 0; c < post.classes(); ++c) {
        if (!post.row_has_var(c)) continue;
        kern::softplus_many(post.rho.row(c), sigma2.data(), post.dim());
        const double* mu = post.mu.row(c);
        for (std::size_t j = 0; j < post.dim(); ++j)
            total += 0.5 * (sigma2[j] + mu[j] * mu[j] - 1.0 - std::log(sigma2[j]));
    }
    return total;
}

namespace {

// Shared forward/backward walk over all (proposal, class) binary targets of
// the probit classifier. grads may be null for the loss-only path.
double probit_focal_core(const Batch& batch, const ClassWeightPosterior& post, double kl_weight,
                         const FocalParams& fp, PosteriorGrads* grads) {
    require(batch.features.rows > 0, "loss_classifier: empty batch");
    require(batch.features.rows == batch.labels.size(), "loss_classifier: labels/features mismatch");
    check_dim(batch.features.cols, post.mu.cols, "loss_classifier");

    const std::size_t n = batch.features.rows;
    const std::size_t cc = post.classes();
    const std::size_t d = post.dim();
    const double inv_count = 1.0 / static_cast<double>(n * cc);

    if (grads) {
        grads->mu = Mat(cc, d);
        grads->rho = Mat(cc, d);
    }

    std::vector<double> sigma2(d), dsig(d);
    double focal_total = 0.0;
    for (std::size_t c = 0; c < cc; ++c) {
        const double* mu = post.mu.row(c);
        const bool with_var = post.row_has_var(c);
        if (with_var) {
            kern::softplus_many(post.rho.row(c), sigma2.data(), d);
            kern::sigmoid_many(post.rho.row(c), dsig.data(), d);  // d softplus / d rho
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* f = batch.features.row(i);
            const bool y = batch.labels[i] == static_cast<int>(c);
            const double mean_a = kern::dot(f, mu, d);
            double kappa = 1.0;
            double var_a = 0.0;
            if (with_var) {
                var_a = kern::dot_sq(f, sigma2.data(), d);
                kappa = 1.0 / std::sqrt(1.0 + probit::kLambdaSq * var_a);
            }
            const double p = probit::sigmoid(mean_a * kappa);
            focal_total += focal_loss(p, y, fp);

            if (grads) {
                const double dl_dp = focal_loss_dp(p, y, fp) * inv_count;
                const double dp_ds = p * (1.0 - p);
                const double g_mean = dl_dp * dp_ds * kappa;
                kern::axpy(g_mean, f, grads->mu.row(c), d);
                if (with_var) {
                    const double g_var =
                        dl_dp * dp_ds * mean_a * (-0.5) * probit::kLambdaSq * kappa * kappa * kappa;
                    double* gr = grads->rho.row(c);
                    for (std::size_t j = 0; j < d; ++j) gr[j] += g_var * f[j] * f[j] * dsig[j];
                }
            }
        }
    }

    double loss = focal_total * inv_count;
    if (kl_weight != 0.0) {
        loss += kl_weight * kl_diag_gaussian(post);
        if (grads) {
            for (std::size_t c = 0; c < cc; ++c) {
                if (!post.row_has_var(c)) continue;
                kern::softplus_many(post.rho.row(c), sigma2.data(), d);
                kern::sigmoid_many(post.rho.row(c), dsig.data(), d);
                const double* mu = post.mu.row(c);
                double* gm = grads->mu.row(c);
                double* gr = grads->rho.row(c);
                for (std::size_t j = 0; j < d; ++j) {
                    gm[j] += kl_weight * mu[j];
                    gr[j] += kl_weight * 0.5 * (1.0 - 1.0 / sigma2[j]) * dsig[j];
                }
            }
        }
    }
    return loss;
}

}  // namespace

double loss_classifier(const Batch& batch, const ClassWeightPosterior& post, double kl_weight,
                       const FocalParams& fp) {
    return probit_focal_core(batch, post, kl_weight, fp, nullptr);
}

double grad_loss_classifier(const Batch& batch, const ClassWeightPosterior& post, double kl_weight,
                            const FocalParams& fp, PosteriorGrads* grads) {
    require(grads != nullptr, "grad_loss_classifier: null grads");
    return probit_focal_core(batch, post, kl_weight, fp, grads);
}

double loss_point(const Batch& batch, const PointClassifier& clf, const FocalParams& fp) {
    return grad_loss_point(batch, clf, fp, nullptr);
}

double grad_loss_point(const Batch& batch, const PointClassifier& clf, const FocalParams& fp,
                       Mat* grad_w) {
    require(batch.features.rows > 0, "loss_point: empty batch");
    check_dim(batch.features.cols, clf.W.cols, "loss_point");
    const std::size_t n = batch.features.rows;
    const std::size_t cc = clf.W.rows;
    const std::size_t d = clf.W.cols;
    const double inv_count = 1.0 / static_cast<double>(n * cc);
    if (grad_w) *grad_w = Mat(cc, d);

    double total = 0.0;
    for (std::size_t c = 0; c < cc; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* f = batch.features.row(i);
            const bool y = batch.labels[i] == static_cast<int>(c);
            const double p = probit::sigmoid(kern::dot(f, clf.W.row(c), d));
            total += focal_loss(p, y, fp);
            if (grad_w) {
                const double g = focal_loss_dp(p, y, fp) * p * (1.0 - p) * inv_count;
                kern::axpy(g, f, grad_w->row(c), d);
            }
        }
    }
    return total * inv_count;
}

std::vector<double> softmax_scores(const Feature& f, const Mat& w) {
    check_dim(f.size(), w.cols, "softmax_scores");
    require(w.rows >= 2, "softmax_scores: needs at least one class plus background");
    std::vector<double> logits(w.rows);
    kern::matvec(w, f.data(), logits.data());
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) {
        l = std::exp(l - m);
        z += l;
    }
    for (auto& l : logits) l /= z;
    return logits;
}

double softmax_ce_loss(const Batch& batch, const Mat& w, Mat* grad_w) {
    require(batch.features.rows > 0, "softmax_ce_loss: empty batch");
    check_dim(batch.features.cols, w.cols, "softmax_ce_loss");
    const std::size_t n = batch.features.rows;
    const std::size_t rows = w.rows;
    const std::size_t background = rows - 1;
    if (grad_w) *grad_w = Mat(rows, w.cols);

    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Feature f(batch.features.row(i), batch.features.row(i) + w.cols);
        const auto probs = softmax_scores(f, w);
        const std::size_t target =
            batch.labels[i] < 0 ? background : static_cast<std::size_t>(batch.labels[i]);
        require(target < rows, "softmax_ce_loss: label out of range");
        total += -std::log(std::max(probs[target], 1e-300));
        if (grad_w) {
            for (std::size_t c = 0; c < rows; ++c) {
                const double g = (probs[c] - (c == target ? 1.0 : 0.0)) / static_cast<double>(n);
                kern::axpy(g, f.data(), grad_w->row(c), w.cols);
            }
        }
    }
    return total / static_cast<double>(n);
}

}  // namespace ifsr::cls
