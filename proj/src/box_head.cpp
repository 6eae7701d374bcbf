#include "ifsr/box_head.hpp"

#include <cmath>
#include <vector>

#include "ifsr/kernels.hpp"
#include "ifsr/probit.hpp"

namespace ifsr::box {
namespace {

void check_pred_shape(const Feature& f, const Mat& pred, const char* who) {
    require(pred.rows == 8, std::string(who) + ": predictor must have 8 rows");
    require(f.size() == pred.cols, std::string(who) + ": feature dimension mismatch");
}

double smooth_l1_grad(double x) {
    if (x > 1.0) return 1.0;
    if (x < -1.0) return -1.0;
    return x;
}

}  // namespace

BoxPrediction predict_box(const Feature& f, const Mat& pred, double u_floor) {
    check_pred_shape(f, pred, "predict_box");
    require(u_floor >= 0.0, "predict_box: negative uncertainty floor");
    BoxPrediction out;
    for (int k = 0; k < 4; ++k) {
        out.m[k] = kern::dot(pred.row(k), f.data(), f.size());
        out.raw[k] = kern::dot(pred.row(4 + k), f.data(), f.size());
        out.u[k] = u_floor + probit::softplus(out.raw[k]);
    }
    return out;
}

Sides refine_box(const Feature& f, const Sides& u, const Mat& ref1, const Mat& ref2, bool use_u) {
    const std::size_t d = f.size();
    require(ref1.cols == d + 4, "refine_box: refiner input dimension mismatch");
    require(ref2.cols == ref1.rows + 1 && ref2.rows == 4, "refine_box: output layer shape mismatch");

    std::vector<double> z(d + 4);
    std::copy(f.begin(), f.end(), z.begin());
    for (int k = 0; k < 4; ++k) {
        require(!use_u || u[k] > 0.0, "refine_box: uncertainty must be positive");
        z[d + k] = use_u ? std::log(u[k]) : 0.0;
    }

    std::vector<double> h(ref1.rows);
    for (std::size_t j = 0; j < ref1.rows; ++j)
        h[j] = std::tanh(kern::dot(ref1.row(j), z.data(), z.size()));

    Sides b;
    for (int k = 0; k < 4; ++k)
        b[k] = kern::dot(ref2.row(k), h.data(), h.size()) + ref2.at(k, ref2.cols - 1);
    return b;
}

double loss_box_uncertainty(const Sides& m, const Sides& u, const Sides& gt) {
    double total = 0.0;
    for (int k = 0; k < 4; ++k) {
        require(u[k] > 0.0, "loss_box_uncertainty: uncertainty must be positive");
        const double r = m[k] - gt[k];
        total += 0.5 * (r * r / (u[k] * u[k]) + u[k] * u[k]);
    }
    return total;
}

double smooth_l1(double x) {
    const double ax = std::fabs(x);
    return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

double loss_refine(const Sides& b, const Sides& gt) {
    double total = 0.0;
    for (int k = 0; k < 4; ++k) total += smooth_l1(b[k] - gt[k]);
    return total;
}

double loss_box_total(const Sides& m, const Sides& u, const Sides& b, const Sides& gt) {
    return loss_box_uncertainty(m, u, gt) + loss_refine(b, gt);
}

double loss_box_gaussian_nll(const Sides& m, const Sides& u, const Sides& gt) {
    double total = 0.0;
    for (int k = 0; k < 4; ++k) {
        require(u[k] > 0.0, "loss_box_gaussian_nll: uncertainty must be positive");
        const double r = m[k] - gt[k];
        total += r * r / (2.0 * u[k] * u[k]) + std::log(u[k]);
    }
    return total;
}

Sides encode_offsets(const SideBox& proposal, const SideBox& target) {
    require(proposal.width() > 0.0 && proposal.height() > 0.0, "encode_offsets: degenerate proposal");
    const double w = proposal.width(), h = proposal.height();
    return {(target.l - proposal.l) / w, (target.t - proposal.t) / h, (target.r - proposal.r) / w,
            (target.b - proposal.b) / h};
}

SideBox decode_offsets(const SideBox& proposal, const Sides& offsets) {
    require(proposal.width() > 0.0 && proposal.height() > 0.0, "decode_offsets: degenerate proposal");
    const double w = proposal.width(), h = proposal.height();
    return {proposal.l + offsets[0] * w, proposal.t + offsets[1] * h, proposal.r + offsets[2] * w,
            proposal.b + offsets[3] * h};
}

double box_loss_batch(BoxMode mode, const BoxBatch& batch, const Mat& pred, const Mat& ref1,
                      const Mat& ref2, bool stop_grad_u, BoxHeadGrads* grads, double u_floor) {
    const std::size_t n = batch.features.rows;
    const std::size_t d = batch.features.cols;
    require(n > 0, "box_loss_batch: empty batch");
    require(batch.targets.rows == n && batch.targets.cols == 4, "box_loss_batch: bad targets");
    require(pred.rows == 8 && pred.cols == d, "box_loss_batch: predictor shape");

    const bool with_refiner = mode == BoxMode::uncert || mode == BoxMode::refine_only;
    const bool u_input = mode == BoxMode::uncert;
    const std::size_t hidden = ref1.rows;
    if (with_refiner) {
        require(ref1.cols == d + 4, "box_loss_batch: refiner input shape");
        require(ref2.rows == 4 && ref2.cols == hidden + 1, "box_loss_batch: refiner output shape");
        require(batch.refine_features.rows == n && batch.refine_features.cols == d,
                "box_loss_batch: missing re-pooled refinement features");
        require(batch.refine_targets.rows == n && batch.refine_targets.cols == 4,
                "box_loss_batch: missing refinement targets");
    }

    if (grads) {
        grads->pred = Mat(8, d);
        grads->ref1 = Mat(ref1.rows, ref1.cols);
        grads->ref2 = Mat(ref2.rows, ref2.cols);
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> z(d + 4), h(hidden), dpre(hidden), dz(d + 4);
    double total = 0.0;

    for (std::size_t i = 0; i < n; ++i) {
        const double* f = batch.features.row(i);
        const double* t = batch.targets.row(i);
        Feature fv(f, f + d);

        const BoxPrediction bp = predict_box(fv, pred, u_floor);
        Sides du{};     // dL/du accumulated across loss terms
        Sides dm{};     // dL/dm
        double loss = 0.0;

        switch (mode) {
            case BoxMode::plain:
            case BoxMode::refine_only:
                for (int k = 0; k < 4; ++k) {
                    const double r = bp.m[k] - t[k];
                    loss += smooth_l1(r);
                    dm[k] = smooth_l1_grad(r);
                }
                break;
            case BoxMode::uncert:
                for (int k = 0; k < 4; ++k) {
                    const double r = bp.m[k] - t[k];
                    const double u2 = bp.u[k] * bp.u[k];
                    loss += 0.5 * (r * r / u2 + u2);
                    dm[k] = r / u2;
                    du[k] = -r * r / (u2 * bp.u[k]) + bp.u[k];
                }
                break;
            case BoxMode::gauss:
                for (int k = 0; k < 4; ++k) {
                    const double r = bp.m[k] - t[k];
                    const double u2 = bp.u[k] * bp.u[k];
                    loss += r * r / (2.0 * u2) + std::log(bp.u[k]);
                    dm[k] = r / u2;
                    du[k] = -r * r / (u2 * bp.u[k]) + 1.0 / bp.u[k];
                }
                break;
        }

        if (with_refiner) {
            const double* f2 = batch.refine_features.row(i);
            const double* t2 = batch.refine_targets.row(i);
            std::copy(f2, f2 + d, z.begin());
            for (int k = 0; k < 4; ++k) z[d + k] = u_input ? std::log(bp.u[k]) : 0.0;
            for (std::size_t j = 0; j < hidden; ++j)
                h[j] = std::tanh(kern::dot(ref1.row(j), z.data(), z.size()));

            Sides db{};
            for (int k = 0; k < 4; ++k) {
                const double bk = kern::dot(ref2.row(k), h.data(), hidden) + ref2.at(k, hidden);
                const double r = bk - t2[k];
                loss += smooth_l1(r);
                db[k] = smooth_l1_grad(r);
            }

            if (grads) {
                std::fill(dpre.begin(), dpre.end(), 0.0);
                for (int k = 0; k < 4; ++k) {
                    const double g = db[k] * inv_n;
                    kern::axpy(g, h.data(), grads->ref2.row(k), hidden);
                    grads->ref2.at(k, hidden) += g;
                }
                for (std::size_t j = 0; j < hidden; ++j) {
                    double dh = 0.0;
                    for (int k = 0; k < 4; ++k) dh += db[k] * ref2.at(k, j);
                    dpre[j] = dh * (1.0 - h[j] * h[j]);
                }
                for (std::size_t j = 0; j < hidden; ++j)
                    kern::axpy(dpre[j] * inv_n, z.data(), grads->ref1.row(j), z.size());
                if (u_input && !stop_grad_u) {
                    std::fill(dz.begin(), dz.end(), 0.0);
                    for (std::size_t j = 0; j < hidden; ++j)
                        kern::axpy(dpre[j], ref1.row(j), dz.data(), z.size());
                    for (int k = 0; k < 4; ++k) du[k] += dz[d + k] / bp.u[k];
                }
            }
        }

        if (grads) {
            for (int k = 0; k < 4; ++k) {
                kern::axpy(dm[k] * inv_n, f, grads->pred.row(k), d);
                if (mode == BoxMode::uncert || mode == BoxMode::gauss) {
                    const double draw = du[k] * probit::sigmoid(bp.raw[k]) * inv_n;
                    kern::axpy(draw, f, grads->pred.row(4 + k), d);
                }
            }
        }
        total += loss;
    }
    return total * inv_n;
}

}  // namespace ifsr::box
