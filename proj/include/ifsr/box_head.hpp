#pragma once

#include <array>

#include "ifsr/common.hpp"

namespace ifsr::box {

/// Axis-aligned box by its four sides in canvas units (unit square canvas).
struct SideBox {
    double l = 0.0, t = 0.0, r = 0.0, b = 0.0;

    double width() const { return r - l; }
    double height() const { return b - t; }
    double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
    bool valid() const { return l < r && t < b; }
};

using Sides = std::array<double, 4>;  // per-side values in l, t, r, b order

/// Which loss drives the box head.
///   plain       - smooth-L1 on the initial offsets only
///   uncert      - uncertainty-weighted loss plus refinement loss, refiner sees log u
///   gauss       - Gaussian-NLL on (m, u); no refiner
///   refine_only - smooth-L1 on m plus refinement loss, refiner input u-slot blanked
enum class BoxMode { plain, uncert, gauss, refine_only };

/// Per-class predictor (8 x D: rows 0..3 offsets, rows 4..7 raw uncertainty),
/// shared refiner first layer (H x (D+4), tanh) and per-class refiner output
/// layer (4 x (H+1), last column bias).
struct BoxHeadShapes {
    std::size_t feat_dim = 0;
    std::size_t hidden = 0;
};

struct BoxPrediction {
    Sides m;    // initial offsets
    Sides u;    // u_floor + softplus(raw), strictly positive
    Sides raw;  // pre-softplus uncertainty activations
};

/// The floor keeps the inverse-u^2 losses away from the singularity when an
/// outlier feature drives softplus(raw) toward zero early in training.
inline constexpr double kDefaultUFloor = 0.05;

BoxPrediction predict_box(const Feature& f, const Mat& pred, double u_floor = kDefaultUFloor);

/// b = ref2 . [tanh(ref1 . [f; log u|0]); 1]. use_u=false blanks the
/// uncertainty slot (the refine-only cascade ablation).
Sides refine_box(const Feature& f, const Sides& u, const Mat& ref1, const Mat& ref2, bool use_u);

/// Eq-style losses on one example (sums over the four sides).
double loss_box_uncertainty(const Sides& m, const Sides& u, const Sides& gt);
double smooth_l1(double x);
double loss_refine(const Sides& b, const Sides& gt);
double loss_box_total(const Sides& m, const Sides& u, const Sides& b, const Sides& gt);
double loss_box_gaussian_nll(const Sides& m, const Sides& u, const Sides& gt);

/// Offsets parameterization: per-side residual over proposal width (l, r) or
/// height (t, b). decode(encode) is the identity for non-degenerate proposals.
Sides encode_offsets(const SideBox& proposal, const SideBox& target);
SideBox decode_offsets(const SideBox& proposal, const Sides& offsets);

struct BoxBatch {
    Mat features;  // N x D, pooled from the proposal
    Mat targets;   // N x 4, gt offsets relative to the proposal

    // refinement stage (uncert / refine_only): features re-pooled from the
    // initially predicted box, and gt offsets relative to that box
    Mat refine_features;  // N x D
    Mat refine_targets;   // N x 4
};

struct BoxHeadGrads {
    Mat pred;  // 8 x D
    Mat ref1;  // H x (D+4)
    Mat ref2;  // 4 x (H+1)
};

/// Mean per-example loss of the selected mode, with analytic gradients for
/// every block when grads is non-null. stop_grad_u detaches u as refiner
/// input (gradient still flows into u via the uncertainty loss itself).
double box_loss_batch(BoxMode mode, const BoxBatch& batch, const Mat& pred, const Mat& ref1,
                      const Mat& ref2, bool stop_grad_u, BoxHeadGrads* grads,
                      double u_floor = kDefaultUFloor);

}  // namespace ifsr::box
