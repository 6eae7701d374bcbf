#include "ifsr/mask_head.hpp"

#include <cmath>

#include "ifsr/kernels.hpp"
#include "ifsr/probit.hpp"

namespace ifsr::mask {
namespace {

constexpr double kEps = 1e-7;

std::size_t grid_side(std::size_t cell_count, const char* who) {
    const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cell_count))));
    require(g * g == cell_count, std::string(who) + ": cell count is not a square grid");
    return g;
}

}  // namespace

Mat mask_logits(const Mat& cells, std::size_t cls, const MaskHeadParams& params) {
    require(cls < params.W.rows, "mask_logits: unknown class");
    require(cells.cols == params.W.cols, "mask_logits: cell feature dimension mismatch");
    const std::size_t g = grid_side(cells.rows, "mask_logits");

    Mat logits(g, g);
    for (std::size_t i = 0; i < cells.rows; ++i)
        logits.v[i] = kern::dot(cells.row(i), params.W.row(cls), cells.cols);
    return logits;
}

Mat mask_probs(const Mat& logits) {
    Mat probs(logits.rows, logits.cols);
    kern::sigmoid_many(logits.v.data(), probs.v.data(), logits.size());
    return probs;
}

double mask_bce_loss(const Mat& probs, const Mat& gt) {
    require(probs.same_shape(gt), "mask_bce_loss: shape mismatch");
    require(probs.size() > 0, "mask_bce_loss: empty grid");
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs.v[i], kEps, 1.0 - kEps);
        total += gt.v[i] != 0.0 ? -std::log(p) : -std::log(1.0 - p);
    }
    return total / static_cast<double>(probs.size());
}

Mat binarize(const Mat& probs) {
    Mat labels(probs.rows, probs.cols);
    for (std::size_t i = 0; i < probs.size(); ++i) labels.v[i] = probs.v[i] >= 0.5 ? 1.0 : 0.0;
    return labels;
}

std::string rle_encode(const Mat& binary) {
    require(binary.rows == binary.cols && binary.rows > 0, "rle_encode: grid must be square");
    std::string out = std::to_string(binary.rows) + "x" + std::to_string(binary.cols) + ":";
    double current = 0.0;  // runs start with background
    std::size_t run = 0;
    bool first = true;
    auto flush = [&]() {
        if (!first) out += ",";
        out += std::to_string(run);
        first = false;
    };
    for (double v : binary.v) {
        const double bit = v != 0.0 ? 1.0 : 0.0;
        if (bit == current) {
            ++run;
        } else {
            flush();
            current = bit;
            run = 1;
        }
    }
    flush();
    return out;
}

Mat rle_decode(const std::string& rle) {
    const auto x = rle.find('x');
    const auto colon = rle.find(':');
    require(x != std::string::npos && colon != std::string::npos && x < colon,
            "rle_decode: malformed header");
    const std::size_t rows = std::stoul(rle.substr(0, x));
    const std::size_t cols = std::stoul(rle.substr(x + 1, colon - x - 1));
    require(rows == cols && rows > 0, "rle_decode: grid must be square");

    Mat grid(rows, cols);
    std::size_t pos = colon + 1;
    std::size_t idx = 0;
    double value = 0.0;
    while (pos < rle.size()) {
        const auto comma = rle.find(',', pos);
        const std::string tok = rle.substr(pos, comma == std::string::npos ? std::string::npos
                                                                           : comma - pos);
        const std::size_t run = std::stoul(tok);
        require(idx + run <= grid.size(), "rle_decode: runs exceed the grid");
        for (std::size_t i = 0; i < run; ++i) grid.v[idx++] = value;
        value = value != 0.0 ? 0.0 : 1.0;
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    require(idx == grid.size(), "rle_decode: runs do not cover the grid");
    return grid;
}

double mask_bce_grad(const Mat& cells, const Mat& gt, const double* w_row, std::size_t d,
                     double* grad_row) {
    require(cells.cols == d, "mask_bce_grad: dimension mismatch");
    require(gt.size() == cells.rows, "mask_bce_grad: target/cell mismatch");
    const double inv_n = 1.0 / static_cast<double>(cells.rows);

    double total = 0.0;
    for (std::size_t i = 0; i < cells.rows; ++i) {
        const double logit = kern::dot(cells.row(i), w_row, d);
        const double p = probit::sigmoid(logit);
        const double y = gt.v[i] != 0.0 ? 1.0 : 0.0;
        const double pc = std::clamp(p, kEps, 1.0 - kEps);
        total += y != 0.0 ? -std::log(pc) : -std::log(1.0 - pc);
        if (grad_row) kern::axpy((p - y) * inv_n, cells.row(i), grad_row, d);
    }
    return total * inv_n;
}

}  // namespace ifsr::mask
