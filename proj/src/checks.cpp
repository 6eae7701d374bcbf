#include "ifsr/checks.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ifsr/box_head.hpp"
#include "ifsr/classifier.hpp"
#include "ifsr/evaluator.hpp"
#include "ifsr/gradcheck.hpp"
#include "ifsr/mask_head.hpp"
#include "ifsr/probit.hpp"
#include "ifsr/rng.hpp"
#include "ifsr/toy_world.hpp"

namespace ifsr::checks {
namespace {

Mat random_mat(Rng& rng, std::size_t r, std::size_t c, double scale) {
    Mat m(r, c);
    for (auto& x : m.v) x = rng.normal(0.0, scale);
    return m;
}

cls::Batch random_cls_batch(Rng& rng, std::size_t n, std::size_t d, int classes) {
    cls::Batch b;
    b.features = Mat(n, d);
    for (auto& x : b.features.v) x = rng.normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) b.features.at(i, d - 1) = 1.0;
    b.labels.resize(n);
    for (auto& l : b.labels) l = static_cast<int>(rng.below(classes + 1)) - 1;
    return b;
}

}  // namespace

CheckResult probit_oracle_sweep(const std::string& csv_out) {
    std::ofstream csv;
    if (!csv_out.empty()) {
        csv.open(csv_out);
        csv << "mean_a,var_a,probit,mc,quadrature,abs_err\n";
        csv.precision(17);
    }

    double max_err = 0.0;
    for (double mean = -6.0; mean <= 6.0 + 1e-9; mean += 0.25) {
        for (double var = 0.0; var <= 10.0 + 1e-9; var += 0.25) {
            const probit::ActivationGaussian g{mean, var};
            const double closed = probit::predictive_probit(g);
            const double quad = predictive_quadrature(g, 64);
            const double err = std::fabs(closed - quad);
            max_err = std::max(max_err, err);
            if (csv.is_open()) {
                const std::uint64_t seed =
                    hash_double_bits(hash_double_bits(fnv1a64("mc-sweep"), mean), var);
                const double mc = probit::predictive_mc(g, 20000, seed);
                csv << mean << "," << var << "," << closed << "," << mc << "," << quad << ","
                    << err << "\n";
            }
        }
    }
    return {"probit_oracle_sweep", max_err <= 0.02, max_err, 0.02,
            "max |closed form - quadrature| over the grid"};
}

std::vector<CheckResult> gradient_checks() {
    std::vector<CheckResult> out;
    const cls::FocalParams fp;

    double worst_cls = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 7);
        const std::size_t d = 4, c = 2, n = 6;
        cls::ClassWeightPosterior post;
        post.mu = random_mat(rng, c, d, 0.7);
        post.rho = random_mat(rng, c, d, 0.8);
        post.has_var.assign(c, 1);
        auto batch = random_cls_batch(rng, n, d, c);
        const double klw = 0.2;

        cls::PosteriorGrads grads;
        cls::grad_loss_classifier(batch, post, klw, fp, &grads);
        auto loss = [&] { return cls::loss_classifier(batch, post, klw, fp); };
        worst_cls = std::max(worst_cls,
                             gradcheck::fd_check(post.mu.v.data(), post.mu.size(), grads.mu.v.data(), loss).max_rel);
        worst_cls = std::max(worst_cls,
                             gradcheck::fd_check(post.rho.v.data(), post.rho.size(), grads.rho.v.data(), loss).max_rel);
    }
    out.push_back({"grad_classifier_probit", worst_cls <= 1e-4, worst_cls, 1e-4,
                   "variational objective through the closed form and softplus"});

    double worst_point = 0.0;
    for (std::uint64_t seed = 11; seed <= 20; ++seed) {
        Rng rng(seed * 7);
        const std::size_t d = 5, c = 3, n = 6;
        cls::PointClassifier clf{random_mat(rng, c, d, 0.7)};
        auto batch = random_cls_batch(rng, n, d, c);
        Mat gw;
        cls::grad_loss_point(batch, clf, fp, &gw);
        auto loss = [&] { return cls::loss_point(batch, clf, fp); };
        worst_point = std::max(worst_point,
                               gradcheck::fd_check(clf.W.v.data(), clf.W.size(), gw.v.data(), loss).max_rel);
    }
    out.push_back({"grad_classifier_point", worst_point <= 1e-4, worst_point, 1e-4,
                   "sigmoid focal loss"});

    double worst_softmax = 0.0;
    for (std::uint64_t seed = 21; seed <= 30; ++seed) {
        Rng rng(seed * 7);
        const std::size_t d = 4;
        Mat w = random_mat(rng, 3, d, 0.7);
        auto batch = random_cls_batch(rng, 6, d, 2);
        Mat gw;
        cls::softmax_ce_loss(batch, w, &gw);
        auto loss = [&] { return cls::softmax_ce_loss(batch, w, nullptr); };
        worst_softmax = std::max(worst_softmax,
                                 gradcheck::fd_check(w.v.data(), w.size(), gw.v.data(), loss).max_rel);
    }
    out.push_back({"grad_softmax_baseline", worst_softmax <= 1e-4, worst_softmax, 1e-4,
                   "cross-entropy with background row"});

    for (auto mode : {box::BoxMode::plain, box::BoxMode::uncert, box::BoxMode::gauss,
                      box::BoxMode::refine_only}) {
        double worst = 0.0;
        for (std::uint64_t seed = 31; seed <= 40; ++seed) {
            Rng rng(seed * 7);
            const std::size_t d = 6, hidden = 5, n = 5;
            Mat pred = random_mat(rng, 8, d, 0.5);
            Mat ref1 = random_mat(rng, hidden, d + 4, 0.5);
            Mat ref2 = random_mat(rng, 4, hidden + 1, 0.5);
            box::BoxBatch batch;
            batch.features = random_mat(rng, n, d, 1.0);
            batch.targets = random_mat(rng, n, 4, 0.3);
            const bool with_refiner =
                mode == box::BoxMode::uncert || mode == box::BoxMode::refine_only;
            if (with_refiner) {
                batch.refine_features = random_mat(rng, n, d, 1.0);
                batch.refine_targets = random_mat(rng, n, 4, 0.2);
            }

            box::BoxHeadGrads grads;
            box::box_loss_batch(mode, batch, pred, ref1, ref2, false, &grads);
            auto loss = [&] {
                return box::box_loss_batch(mode, batch, pred, ref1, ref2, false, nullptr);
            };
            worst = std::max(worst,
                             gradcheck::fd_check(pred.v.data(), pred.size(), grads.pred.v.data(), loss).max_rel);
            if (with_refiner) {
                worst = std::max(worst,
                                 gradcheck::fd_check(ref1.v.data(), ref1.size(), grads.ref1.v.data(), loss).max_rel);
                worst = std::max(worst,
                                 gradcheck::fd_check(ref2.v.data(), ref2.size(), grads.ref2.v.data(), loss).max_rel);
            }
        }
        const char* names[] = {"grad_box_plain", "grad_box_uncert", "grad_box_gauss",
                               "grad_box_refine_only"};
        out.push_back({names[static_cast<int>(mode)], worst <= 1e-4, worst, 1e-4,
                       "box losses through predictor and refiner"});
    }

    double worst_mask = 0.0;
    for (std::uint64_t seed = 41; seed <= 50; ++seed) {
        Rng rng(seed * 7);
        const std::size_t g = 4, dm = 5;
        Mat cells = random_mat(rng, g * g, dm, 1.0);
        Mat gt(g, g);
        for (auto& y : gt.v) y = rng.below(2) ? 1.0 : 0.0;
        std::vector<double> w(dm);
        for (auto& x : w) x = rng.normal(0.0, 0.7);
        std::vector<double> grad(dm, 0.0);
        mask::mask_bce_grad(cells, gt, w.data(), dm, grad.data());
        auto loss = [&] { return mask::mask_bce_grad(cells, gt, w.data(), dm, nullptr); };
        worst_mask = std::max(worst_mask, gradcheck::fd_check(w.data(), dm, grad.data(), loss).max_rel);
    }
    out.push_back({"grad_mask_bce", worst_mask <= 1e-4, worst_mask, 1e-4, "mask BCE"});

    return out;
}

CheckResult evaluator_equivalence(std::size_t scenes) {
    world::WorldConfig cfg;
    cfg.seed = 97;
    cfg.test_scenes = scenes;
    cfg.base_scenes = 1;
    world::World w(cfg);
    auto ds = world::generate_dataset(cfg);

    std::vector<int> all_ids;
    for (std::size_t c = 0; c < cfg.classes(); ++c) all_ids.push_back(static_cast<int>(c));
    const auto grid = world::default_iou_grid();

    Rng rng(4242);
    double max_diff = 0.0;
    // several random detection sets over subsets of the scenes
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<world::Scene> subset(ds.test.begin() + trial * (scenes / 5),
                                         ds.test.begin() + (trial + 1) * (scenes / 5));
        std::vector<std::vector<world::Detection>> dets;
        for (const auto& s : subset) {
            std::vector<world::Detection> sd;
            for (std::size_t oi = 0; oi < s.objects.size(); ++oi) {
                const auto& o = s.objects[oi];
                const int copies = 1 + static_cast<int>(rng.below(3));
                for (int c2 = 0; c2 < copies; ++c2) {
                    world::Detection d;
                    d.class_id = rng.uniform() < 0.75
                                     ? o.class_id
                                     : static_cast<int>(rng.below(cfg.classes()));
                    d.score = rng.uniform(0.05, 1.0);
                    const double j = 0.02 + 0.08 * rng.uniform();
                    d.bbox = {o.bbox.l + rng.normal(0, j), o.bbox.t + rng.normal(0, j),
                              o.bbox.r + rng.normal(0, j), o.bbox.b + rng.normal(0, j)};
                    if (!d.bbox.valid()) d.bbox = o.bbox;
                    d.mask = Mat(cfg.mask_grid, cfg.mask_grid);
                    auto gt = w.gt_mask_grid(s, oi, d.bbox, cfg.mask_grid);
                    for (std::size_t i = 0; i < gt.size(); ++i)
                        d.mask.v[i] = rng.uniform() < 0.9 ? gt.v[i] : 1.0 - gt.v[i];
                    sd.push_back(d);
                }
            }
            dets.push_back(sd);
        }
        for (auto mode : {world::ApMode::box, world::ApMode::mask}) {
            const double fast = world::average_precision(dets, subset, w, mode, all_ids, grid);
            const double ref =
                world::reference_average_precision(dets, subset, w, mode, all_ids, grid);
            max_diff = std::max(max_diff, std::fabs(fast - ref));
        }
    }
    return {"evaluator_equivalence", max_diff <= 1e-9, max_diff, 1e-9,
            "average_precision vs brute-force reference"};
}

std::vector<CheckResult> run_all(const std::string& csv_out) {
    std::vector<CheckResult> all;
    all.push_back(probit_oracle_sweep(csv_out));
    auto grads = gradient_checks();
    all.insert(all.end(), grads.begin(), grads.end());
    all.push_back(evaluator_equivalence());
    return all;
}

}  // namespace ifsr::checks
