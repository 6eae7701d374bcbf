#pragma once

#include <vector>

#include "ifsr/common.hpp"

namespace ifsr::cls {

struct FocalParams {
    double gamma = 2.0;
    double alpha = 0.25;
};

/// Point-estimate per-class binary classifier: score_c = sigmoid(f . W_c).
struct PointClassifier {
    Mat W;  // C x D
};

/// Per-class diagonal Gaussian over classifier weights. Variance is
/// parameterized as softplus(rho) for rows with has_var set; rows without it
/// are exact point estimates (the merged base rows carry zero variance and
/// never a rho).
struct ClassWeightPosterior {
    Mat mu;                        // C x D
    Mat rho;                       // C x D; ignored where has_var is false
    std::vector<std::uint8_t> has_var;  // per row

    std::size_t classes() const { return mu.rows; }
    std::size_t dim() const { return mu.cols; }
    bool row_has_var(std::size_t c) const { return c < has_var.size() && has_var[c] != 0; }
};

/// Classification training batch: one row per proposal feature, label is the
/// trained-class index or -1 for background (all-negative binary targets).
struct Batch {
    Mat features;             // N x D
    std::vector<int> labels;  // N
};

std::vector<double> class_scores_point(const Feature& f, const PointClassifier& clf);
std::vector<double> class_scores_probit(const Feature& f, const ClassWeightPosterior& post);

/// Focal loss on a single binary target; p is clamped to [1e-7, 1 - 1e-7].
double focal_loss(double p, bool y, const FocalParams& fp);
/// d focal / d p (zero where the clamp is active).
double focal_loss_dp(double p, bool y, const FocalParams& fp);

/// KL(N(mu, sigma^2) || N(0, 1)) summed over rows with variance.
double kl_diag_gaussian(const ClassWeightPosterior& post);

/// Mean focal loss over all (proposal, class) binary targets plus
/// kl_weight * kl_diag_gaussian. Rejects an empty batch.
double loss_classifier(const Batch& batch, const ClassWeightPosterior& post, double kl_weight,
                       const FocalParams& fp);

struct PosteriorGrads {
    Mat mu;   // same shape as post.mu
    Mat rho;  // same shape as post.rho
};

/// Analytic gradient of loss_classifier; returns the loss value.
double grad_loss_classifier(const Batch& batch, const ClassWeightPosterior& post, double kl_weight,
                            const FocalParams& fp, PosteriorGrads* grads);

/// Mean focal loss of the point classifier (base pretraining objective).
double loss_point(const Batch& batch, const PointClassifier& clf, const FocalParams& fp);
double grad_loss_point(const Batch& batch, const PointClassifier& clf, const FocalParams& fp,
                       Mat* grad_w);

/// Softmax/cross-entropy baseline. W has C+1 rows; the last row is the
/// background class.
std::vector<double> softmax_scores(const Feature& f, const Mat& w_with_background);
double softmax_ce_loss(const Batch& batch, const Mat& w_with_background, Mat* grad_w);

}  // namespace ifsr::cls
