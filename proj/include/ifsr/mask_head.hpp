#pragma once

#include "ifsr/common.hpp"

namespace ifsr::mask {

/// Per-class linear map from a per-cell feature to one logit; no cross-cell
/// coupling anywhere in this head.
struct MaskHeadParams {
    Mat W;  // C x D_m
};

/// cells is (G*G) x D_m, one row per grid cell in row-major grid order.
/// Returns G x G logits. Throws on an unknown class row.
Mat mask_logits(const Mat& cells, std::size_t cls, const MaskHeadParams& params);

/// Elementwise sigmoid of a logit grid.
Mat mask_probs(const Mat& logits);

/// Mean binary cross-entropy over cells, probabilities clamped at 1e-7.
double mask_bce_loss(const Mat& probs, const Mat& gt);

/// Foreground iff p >= 0.5.
Mat binarize(const Mat& probs);

/// BCE loss of one example through the sigmoid, with the analytic gradient
/// for the class row accumulated into grad_row (length D_m) when non-null.
double mask_bce_grad(const Mat& cells, const Mat& gt, const double* w_row, std::size_t d,
                     double* grad_row);

/// Run-length encoding of a binary grid, row-major, runs alternating starting
/// with background: "GxG:c0,c1,...". Round-trips exactly.
std::string rle_encode(const Mat& binary);
Mat rle_decode(const std::string& rle);

}  // namespace ifsr::mask
