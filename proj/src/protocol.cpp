#include "ifsr/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "ifsr/evaluator.hpp"
#include "ifsr/kernels.hpp"
#include "ifsr/probit.hpp"
#include "ifsr/rng.hpp"

namespace ifsr::proto {

const std::vector<VariantSpec>& all_variants() {
    static const std::vector<VariantSpec> v = {
        {"mask_rcnn_softmax", ClassifierMode::softmax, box::BoxMode::plain, false},
        {"mask_sigmoid", ClassifierMode::point, box::BoxMode::plain, false},
        {"mask_probit", ClassifierMode::probit, box::BoxMode::plain, false},
        {"mask_mc", ClassifierMode::mc, box::BoxMode::plain, false},
        {"mask_sig_uncert", ClassifierMode::point, box::BoxMode::uncert, true},
        {"mask_sig_gauss", ClassifierMode::point, box::BoxMode::gauss, false},
        {"mask_sig_refine", ClassifierMode::point, box::BoxMode::refine_only, true},
        {"ifs_rcnn", ClassifierMode::probit, box::BoxMode::uncert, true},
    };
    return v;
}

const VariantSpec& variant_spec(const std::string& name) {
    for (const auto& v : all_variants())
        if (name == v.name) return v;
    throw std::invalid_argument("unknown variant '" + name + "'");
}

int Model::row_of(int class_id) const {
    for (std::size_t i = 0; i < registry.size(); ++i)
        if (registry[i].id == class_id) return static_cast<int>(i);
    return -1;
}

void sgd_step(Mat& params, const Mat& grads, double lr) {
    require(params.same_shape(grads), "sgd_step: shape mismatch");
    for (double g : grads.v)
        if (!std::isfinite(g)) throw NumericalError("sgd_step: non-finite gradient");
    kern::axpy(-lr, grads.v.data(), params.v.data(), params.size());
}

namespace {

// sgd_step with the block's gradient norm clipped; tames the inverse-u^2
// box losses on extreme early residuals
void clipped_step(Mat& params, const Mat& grads, double lr, double clip) {
    double norm_sq = 0.0;
    for (double g : grads.v) norm_sq += g * g;
    const double norm = std::sqrt(norm_sq);
    if (clip > 0.0 && norm > clip)
        sgd_step(params, grads, lr * clip / norm);
    else
        sgd_step(params, grads, lr);
}

}  // namespace

namespace {

// Precomputed per-scene training data. Features are frozen, so extraction
// happens once; mask training uses one matched proposal per object.
struct SceneTrain {
    const world::Scene* scene = nullptr;
    std::vector<world::Proposal> props;
    Mat features;                 // P x D
    std::vector<int> cls_labels;  // class id or -1

    struct BoxItem {
        std::size_t prop;
        int cls;
        box::Sides target;
        box::SideBox prop_box;
        box::SideBox gt_box;
    };
    std::vector<BoxItem> box_items;

    struct MaskItem {
        int cls;
        Mat cells;  // (G*G) x D_m
        Mat gt;     // G x G
    };
    std::vector<MaskItem> mask_items;
};

SceneTrain build_scene_train(const world::World& w, const world::Scene& s,
                             const cfg::Config& config) {
    const auto& wc = w.config();
    const double thr_cls = config.get_double("thresholds.match_iou_cls");
    const double thr_box = config.get_double("thresholds.match_iou_box");
    const std::size_t grid = wc.mask_grid;

    SceneTrain st;
    st.scene = &s;
    st.props = world::make_proposals(wc, s);
    world::match_proposals(st.props, s, thr_cls);

    st.features = Mat(st.props.size(), wc.feat_dim);
    st.cls_labels.resize(st.props.size());
    for (std::size_t i = 0; i < st.props.size(); ++i) {
        const Feature f = w.extract(s, st.props[i].bbox);
        std::copy(f.begin(), f.end(), st.features.row(i));
        st.cls_labels[i] =
            st.props[i].matched_gt >= 0 ? s.objects[st.props[i].matched_gt].class_id : -1;
    }

    auto box_props = st.props;
    world::match_proposals(box_props, s, thr_box);
    for (std::size_t i = 0; i < box_props.size(); ++i) {
        if (box_props[i].matched_gt < 0) continue;
        const auto& obj = s.objects[box_props[i].matched_gt];
        st.box_items.push_back({i, obj.class_id, box::encode_offsets(box_props[i].bbox, obj.bbox),
                                box_props[i].bbox, obj.bbox});
    }

    std::vector<char> covered(s.objects.size(), 0);
    for (std::size_t i = 0; i < st.props.size(); ++i) {
        const int gt = st.props[i].matched_gt;
        if (gt < 0 || covered[gt]) continue;
        covered[gt] = 1;
        st.mask_items.push_back({s.objects[gt].class_id,
                                 w.mask_cells(s, st.props[i].bbox, grid),
                                 w.gt_mask_grid(s, gt, st.props[i].bbox, grid)});
    }
    return st;
}

// classifier batch over a set of scenes, with class ids remapped to rows
cls::Batch gather_cls_batch(const std::vector<SceneTrain>& scenes,
                            const std::vector<std::size_t>& idx, const Model& m) {
    std::size_t total = 0;
    for (auto i : idx) total += scenes[i].props.size();
    cls::Batch b;
    b.features = Mat(total, scenes[idx[0]].features.cols);
    b.labels.resize(total);
    std::size_t at = 0;
    for (auto i : idx) {
        const auto& st = scenes[i];
        for (std::size_t p = 0; p < st.props.size(); ++p, ++at) {
            std::copy(st.features.row(p), st.features.row(p) + st.features.cols,
                      b.features.row(at));
            b.labels[at] = st.cls_labels[p] < 0 ? -1 : m.row_of(st.cls_labels[p]);
        }
    }
    return b;
}

// per-registry-row box batches over a set of scenes, plus the scene/box
// metadata needed to build the refinement stage
struct BoxRowMeta {
    const world::Scene* scene;
    box::SideBox prop;
    box::SideBox gt;
};

std::vector<box::BoxBatch> gather_box_batches(const std::vector<SceneTrain>& scenes,
                                              const std::vector<std::size_t>& idx, const Model& m,
                                              std::vector<std::vector<BoxRowMeta>>* metas) {
    const std::size_t rows = m.registry.size();
    std::vector<std::size_t> counts(rows, 0);
    for (auto i : idx)
        for (const auto& item : scenes[i].box_items) {
            const int r = m.row_of(item.cls);
            if (r >= 0) ++counts[r];
        }

    std::vector<box::BoxBatch> batches(rows);
    if (metas) metas->assign(rows, {});
    const std::size_t d = scenes[idx[0]].features.cols;
    for (std::size_t r = 0; r < rows; ++r) {
        batches[r].features = Mat(counts[r], d);
        batches[r].targets = Mat(counts[r], 4);
    }
    std::vector<std::size_t> at(rows, 0);
    for (auto i : idx) {
        const auto& st = scenes[i];
        for (const auto& item : st.box_items) {
            const int r = m.row_of(item.cls);
            if (r < 0) continue;
            std::copy(st.features.row(item.prop), st.features.row(item.prop) + d,
                      batches[r].features.row(at[r]));
            for (int k = 0; k < 4; ++k) batches[r].targets.at(at[r], k) = item.target[k];
            if (metas) (*metas)[r].push_back({st.scene, item.prop_box, item.gt_box});
            ++at[r];
        }
    }
    return batches;
}

// decode the initial box prediction, clamped to the canvas; falls back to the
// proposal when degenerate
box::SideBox initial_box(const box::SideBox& proposal, const box::Sides& m_offsets) {
    auto bm = box::decode_offsets(proposal, m_offsets);
    bm.l = std::clamp(bm.l, 0.0, 1.0);
    bm.t = std::clamp(bm.t, 0.0, 1.0);
    bm.r = std::clamp(bm.r, 0.0, 1.0);
    bm.b = std::clamp(bm.b, 0.0, 1.0);
    if (!bm.valid() || bm.width() < 0.01 || bm.height() < 0.01) return proposal;
    return bm;
}

void check_finite_loss(double loss, const char* stage, std::size_t iter) {
    if (!std::isfinite(loss))
        throw NumericalError(std::string(stage) + ": non-finite loss at iteration " +
                             std::to_string(iter));
}

// one box-head step over the given scenes; trains pred (+ refiner when the
// mode has one and train_refiner is set)
void box_step(Model& m, const std::vector<SceneTrain>& scenes,
              const std::vector<std::size_t>& idx, box::BoxMode mode, bool train_refiner,
              bool train_ref1, double lr, double clip, double refiner_scale, const char* stage,
              std::size_t iter) {
    const bool stop_u = m.config.get_bool("loss.stop_grad_u");
    const double u_floor = m.config.get_double("box.u_floor");
    const double ref_lr = lr * refiner_scale;
    const bool with_refiner = mode == box::BoxMode::uncert || mode == box::BoxMode::refine_only;
    std::vector<std::vector<BoxRowMeta>> metas;
    auto batches = gather_box_batches(scenes, idx, m, with_refiner ? &metas : nullptr);
    Mat ref1_grad_sum(m.box_ref1.rows, m.box_ref1.cols);
    for (std::size_t r = 0; r < batches.size(); ++r) {
        if (batches[r].features.rows == 0) continue;
        if (with_refiner) {
            // refinement stage: features re-pooled from the initial predicted
            // box, targets relative to it; the box coordinates are detached
            const std::size_t nb = batches[r].features.rows;
            const std::size_t d = batches[r].features.cols;
            batches[r].refine_features = Mat(nb, d);
            batches[r].refine_targets = Mat(nb, 4);
            for (std::size_t i = 0; i < nb; ++i) {
                Feature f(batches[r].features.row(i), batches[r].features.row(i) + d);
                const auto bp = box::predict_box(f, m.box_pred[r], u_floor);
                const auto bm = initial_box(metas[r][i].prop, bp.m);
                const Feature f2 = m.trunk->extract(*metas[r][i].scene, bm);
                std::copy(f2.begin(), f2.end(), batches[r].refine_features.row(i));
                const auto t2 = box::encode_offsets(bm, metas[r][i].gt);
                for (int k = 0; k < 4; ++k) batches[r].refine_targets.at(i, k) = t2[k];
            }
        }
        box::BoxHeadGrads grads;
        const double loss = box::box_loss_batch(mode, batches[r], m.box_pred[r], m.box_ref1,
                                                m.box_ref2[r], stop_u, &grads, u_floor);
        check_finite_loss(loss, stage, iter);
        // the inverse-u^2 data term amplifies the predictor's effective step;
        // cancel the mean amplification so every box mode trains at a
        // comparable pace (the relative per-side weighting is untouched)
        double pred_lr = lr;
        if (mode == box::BoxMode::uncert || mode == box::BoxMode::gauss) {
            double wsum = 0.0;
            const std::size_t nb = batches[r].features.rows;
            for (std::size_t i = 0; i < nb; ++i) {
                Feature f(batches[r].features.row(i), batches[r].features.row(i) + batches[r].features.cols);
                const auto bp = box::predict_box(f, m.box_pred[r], u_floor);
                for (int k = 0; k < 4; ++k) wsum += 1.0 / (bp.u[k] * bp.u[k]);
            }
            const double wbar = wsum / static_cast<double>(4 * nb);
            if (wbar > 1.0) pred_lr = lr / wbar;
        }
        clipped_step(m.box_pred[r], grads.pred, pred_lr, clip);
        if (train_refiner && (mode == box::BoxMode::uncert || mode == box::BoxMode::refine_only)) {
            clipped_step(m.box_ref2[r], grads.ref2, ref_lr, clip);
            if (train_ref1)
                kern::axpy(1.0, grads.ref1.v.data(), ref1_grad_sum.v.data(), ref1_grad_sum.size());
        }
    }
    if (train_refiner && train_ref1) clipped_step(m.box_ref1, ref1_grad_sum, ref_lr, clip);
}

// one mask-head step: accumulate per-row gradients over the scenes' items
void mask_step(Model& m, const std::vector<SceneTrain>& scenes,
               const std::vector<std::size_t>& idx, double lr, const char* stage,
               std::size_t iter) {
    const std::size_t dm = m.mask_head.W.cols;
    Mat grads(m.mask_head.W.rows, dm);
    std::vector<std::size_t> counts(m.mask_head.W.rows, 0);
    for (auto i : idx)
        for (const auto& item : scenes[i].mask_items) {
            const int r = m.row_of(item.cls);
            if (r >= 0) ++counts[r];
        }
    for (auto i : idx) {
        for (const auto& item : scenes[i].mask_items) {
            const int r = m.row_of(item.cls);
            if (r < 0) continue;
            Mat row_grad(1, dm);
            const double loss =
                mask::mask_bce_grad(item.cells, item.gt, m.mask_head.W.row(r), dm, row_grad.v.data());
            check_finite_loss(loss, stage, iter);
            kern::axpy(1.0 / static_cast<double>(counts[r]), row_grad.v.data(), grads.row(r), dm);
        }
    }
    sgd_step(m.mask_head.W, grads, lr);
}

// Focal gradients over all (proposal, class) targets are diluted by the
// overwhelmingly negative target count; rescaling the whole objective by
// targets/positives (a positive scalar) restores the usual per-positive
// normalization without changing the minimizer or the focal:KL ratio.
// The probit's closed form flattens the effective slope by
// 1/sqrt(1 + lambda^2 Sigma_a); stepping with the inverse factor keeps the
// Bayesian head's optimization pace comparable to the point head's, and the
// factor anneals to 1 as the posterior variance shrinks.
double probit_slope_rescale(const cls::Batch& b, const cls::ClassWeightPosterior& post) {
    double acc = 0.0;
    std::size_t n = 0;
    std::vector<double> sigma2(post.dim());
    for (std::size_t c = 0; c < post.classes(); ++c) {
        if (!post.row_has_var(c)) continue;
        kern::softplus_many(post.rho.row(c), sigma2.data(), post.dim());
        for (std::size_t i = 0; i < b.features.rows; ++i) {
            acc += kern::dot_sq(b.features.row(i), sigma2.data(), post.dim());
            ++n;
        }
    }
    if (n == 0) return 1.0;
    return std::sqrt(1.0 + probit::kLambdaSq * acc / static_cast<double>(n));
}

double positive_rescale(const cls::Batch& b, std::size_t n_classes) {
    std::size_t n_pos = 0;
    for (int l : b.labels)
        if (l >= 0) ++n_pos;
    const double targets = static_cast<double>(b.labels.size() * n_classes);
    return targets / static_cast<double>(std::max<std::size_t>(1, n_pos));
}

std::vector<std::size_t> batch_indices(std::size_t iter, std::size_t batch, std::size_t total) {
    std::vector<std::size_t> idx;
    idx.reserve(std::min(batch, total));
    for (std::size_t j = 0; j < std::min(batch, total); ++j)
        idx.push_back((iter * batch + j) % total);
    return idx;
}

double pretrain_lr(const cfg::Config& config, std::size_t iter, std::size_t total) {
    const double base = config.get_double("train.lr_pretrain");
    const double rate = config.get_double("train.decay_rate");
    const auto d1 = static_cast<std::size_t>(config.get_double("train.decay1") * total);
    const auto d2 = static_cast<std::size_t>(config.get_double("train.decay2") * total);
    double lr = base;
    if (iter >= d1) lr /= rate;
    if (iter >= d2) lr /= rate;
    return lr;
}

}  // namespace

Model pretrain_base(const std::vector<world::Scene>& base_scenes, const cfg::Config& config,
                    std::vector<double>* loss_trace) {
    config.validate();
    const auto wc = config.world_config();
    const auto& spec = variant_spec(config.get("variant"));

    require(!base_scenes.empty(), "pretrain_base: empty dataset");
    std::vector<char> seen(wc.n_base, 0);
    for (const auto& s : base_scenes)
        for (const auto& o : s.objects) {
            require(o.class_id >= 0 && o.class_id < static_cast<int>(wc.n_base),
                    "pretrain_base: non-base class in base dataset");
            seen[o.class_id] = 1;
        }
    for (std::size_t c = 0; c < wc.n_base; ++c)
        require(seen[c] != 0, "pretrain_base: base class " + std::to_string(c) + " has no examples");

    Model m;
    m.config = config;
    m.trunk = std::make_shared<world::World>(wc);
    for (std::size_t c = 0; c < wc.n_base; ++c) m.registry.push_back({static_cast<int>(c), true});

    const std::size_t d = wc.feat_dim;
    const std::size_t hidden = static_cast<std::size_t>(config.get_int("box.hidden"));
    const std::size_t n_rows = m.registry.size();
    const double init_sd = config.get_double("train.init_sd");

    const std::uint64_t root = fnv1a64(&wc.seed, sizeof(wc.seed));
    Rng init_rng(hash_combine(root, 0xBB01));

    m.post.mu = Mat(n_rows, d);
    m.post.rho = Mat(n_rows, d);
    m.post.has_var.assign(n_rows, 0);
    for (auto& x : m.post.mu.v) x = init_rng.normal(0.0, init_sd);
    if (spec.classifier == ClassifierMode::softmax) {
        m.softmax_w = Mat(n_rows + 1, d);
        for (auto& x : m.softmax_w.v) x = init_rng.normal(0.0, init_sd);
    }

    m.box_ref1 = Mat(hidden, d + 4);
    for (auto& x : m.box_ref1.v) x = init_rng.normal(0.0, 1.0 / std::sqrt(double(d + 4)));
    for (std::size_t r = 0; r < n_rows; ++r) {
        Mat pred(8, d);
        for (std::size_t k = 0; k < 4 * d; ++k) pred.v[k] = init_rng.normal(0.0, init_sd);
        m.box_pred.push_back(std::move(pred));       // u rows start at softplus(0)
        m.box_ref2.emplace_back(4, hidden + 1);      // refiner starts as the identity offset
    }
    m.mask_head.W = Mat(n_rows, wc.mask_feat_dim);

    std::vector<SceneTrain> scenes;
    scenes.reserve(base_scenes.size());
    for (const auto& s : base_scenes) scenes.push_back(build_scene_train(*m.trunk, s, config));

    const auto focal = config.focal();
    const auto iters = static_cast<std::size_t>(config.get_int("train.pretrain_iters"));
    const auto batch = static_cast<std::size_t>(config.get_int("train.batch_scenes"));

    // phase A: classifier + smooth-L1 box + mask, everything point-estimate
    for (std::size_t it = 0; it < iters; ++it) {
        const double lr = pretrain_lr(config, it, iters);
        const auto idx = batch_indices(it, batch, scenes.size());
        const auto cbatch = gather_cls_batch(scenes, idx, m);

        double cls_loss;
        if (spec.classifier == ClassifierMode::softmax) {
            Mat gw;
            cls_loss = cls::softmax_ce_loss(cbatch, m.softmax_w, &gw);
            check_finite_loss(cls_loss, "pretrain/cls", it);
            sgd_step(m.softmax_w, gw, lr);
        } else {
            cls::PointClassifier pc{m.post.mu};
            Mat gw;
            cls_loss = cls::grad_loss_point(cbatch, pc, focal, &gw);
            check_finite_loss(cls_loss, "pretrain/cls", it);
            sgd_step(m.post.mu, gw, lr * positive_rescale(cbatch, n_rows));
        }
        if (loss_trace) loss_trace->push_back(cls_loss);
        box_step(m, scenes, idx, box::BoxMode::plain, false, false, lr,
                 config.get_double("train.grad_clip"), 1.0, "pretrain/box", it);
        mask_step(m, scenes, idx, lr, "pretrain/mask", it);
    }

    // phase B: freeze classifier and mask, train the box predictor/refiner
    // with the variant's box loss
    if (spec.box_mode != box::BoxMode::plain) {
        const auto iters_b = static_cast<std::size_t>(config.get_int("train.phaseb_iters"));
        for (std::size_t it = 0; it < iters_b; ++it) {
            const double lr = pretrain_lr(config, it, iters_b);
            const auto idx = batch_indices(it, batch, scenes.size());
            box_step(m, scenes, idx, spec.box_mode, true, true, lr,
                     config.get_double("train.grad_clip"),
                     config.get_double("train.lr_refiner_scale"), "pretrain/phase-b", it);
        }
    }
    return m;
}

Model finetune_new(const Model& base, const std::vector<world::Scene>& shot_scenes,
                   const cfg::Config& config) {
    config.validate();
    const auto wc = config.world_config();
    const auto& spec = variant_spec(config.get("variant"));

    require(!shot_scenes.empty(), "finetune_new: empty shot set");
    for (const auto& s : shot_scenes)
        for (const auto& o : s.objects)
            require(o.class_id >= static_cast<int>(wc.n_base),
                    "finetune_new: shot set contains base-class labels");

    Model m;
    m.config = config;
    m.trunk = base.trunk;  // frozen, shared
    for (std::size_t c = 0; c < wc.n_new; ++c)
        m.registry.push_back({static_cast<int>(wc.n_base + c), false});

    const std::size_t d = wc.feat_dim;
    const std::size_t n_rows = m.registry.size();
    const bool bayesian =
        spec.classifier == ClassifierMode::probit || spec.classifier == ClassifierMode::mc;

    m.post.mu = Mat(n_rows, d);  // zeros: the KL term starts at its sigma-only value
    m.post.rho = Mat(n_rows, d);
    const double init_var = config.get_double("train.rho_init_var");
    require(init_var > 0.0, "finetune_new: train.rho_init_var must be positive");
    m.post.rho.fill(std::log(std::expm1(init_var)));  // softplus^{-1}
    m.post.has_var.assign(n_rows, bayesian ? 1 : 0);

    m.box_ref1 = base.box_ref1;  // frozen copy, byte-identical
    const std::size_t hidden = m.box_ref1.rows;

    // new-class last layers start from the base-class averages: the shared
    // refiner's inputs stay wired to a sensible readout even when the shots
    // never show the regimes (occlusion, extreme aspect) the base saw
    Mat pred_init(8, d), ref2_init(4, hidden + 1), mask_init(1, wc.mask_feat_dim);
    if (config.get_bool("train.box_init_from_base") && !base.registry.empty()) {
        const double inv = 1.0 / static_cast<double>(base.registry.size());
        for (std::size_t r = 0; r < base.registry.size(); ++r) {
            kern::axpy(inv, base.box_pred[r].v.data(), pred_init.v.data(), pred_init.size());
            kern::axpy(inv, base.box_ref2[r].v.data(), ref2_init.v.data(), ref2_init.size());
            kern::axpy(inv, base.mask_head.W.row(r), mask_init.v.data(), mask_init.size());
        }
    }
    for (std::size_t r = 0; r < n_rows; ++r) {
        m.box_pred.push_back(pred_init);
        m.box_ref2.push_back(ref2_init);
    }
    m.mask_head.W = Mat(n_rows, wc.mask_feat_dim);
    for (std::size_t r = 0; r < n_rows; ++r)
        std::copy(mask_init.v.begin(), mask_init.v.end(), m.mask_head.W.row(r));

    // softmax baseline: new rows train against frozen base + background logits
    Mat softmax_full;
    const std::size_t base_rows = base.registry.size();
    if (spec.classifier == ClassifierMode::softmax) {
        require(base.softmax_w.rows == base_rows + 1, "finetune_new: base softmax weights missing");
        softmax_full = Mat(base_rows + n_rows + 1, d);
        for (std::size_t r = 0; r < base_rows; ++r)
            std::copy(base.softmax_w.row(r), base.softmax_w.row(r) + d, softmax_full.row(r));
        std::copy(base.softmax_w.row(base_rows), base.softmax_w.row(base_rows) + d,
                  softmax_full.row(base_rows + n_rows));  // background row last
    }

    std::vector<SceneTrain> scenes;
    for (const auto& s : shot_scenes) scenes.push_back(build_scene_train(*m.trunk, s, config));

    std::vector<std::size_t> all_idx(scenes.size());
    for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;

    const auto focal = config.focal();
    const double klw = config.kl_weight();
    const double lr = config.get_double("train.lr_finetune");
    const std::size_t iters = config.finetune_iters();

    for (std::size_t it = 0; it < iters; ++it) {
        // full batch over the K * N_new shots
        auto cbatch = gather_cls_batch(scenes, all_idx, m);

        switch (spec.classifier) {
            case ClassifierMode::probit:
            case ClassifierMode::mc: {
                cls::PosteriorGrads grads;
                check_finite_loss(cls::grad_loss_classifier(cbatch, m.post, klw, focal, &grads),
                                  "finetune/cls", it);
                const double scaled = lr * positive_rescale(cbatch, n_rows) *
                                      probit_slope_rescale(cbatch, m.post);
                sgd_step(m.post.mu, grads.mu, scaled);
                sgd_step(m.post.rho, grads.rho,
                         scaled * config.get_double("train.lr_rho_scale"));
                break;
            }
            case ClassifierMode::point: {
                cls::PointClassifier pc{m.post.mu};
                Mat gw;
                check_finite_loss(cls::grad_loss_point(cbatch, pc, focal, &gw), "finetune/cls", it);
                sgd_step(m.post.mu, gw, lr * positive_rescale(cbatch, n_rows));
                break;
            }
            case ClassifierMode::softmax: {
                // remap labels to rows of the concatenated matrix
                for (auto& l : cbatch.labels)
                    if (l >= 0) l += static_cast<int>(base_rows);
                Mat gw;
                check_finite_loss(cls::softmax_ce_loss(cbatch, softmax_full, &gw), "finetune/cls",
                                  it);
                for (std::size_t r = 0; r < n_rows; ++r) {
                    Mat row_p(1, d), row_g(1, d);
                    std::copy(softmax_full.row(base_rows + r), softmax_full.row(base_rows + r) + d,
                              row_p.v.begin());
                    std::copy(gw.row(base_rows + r), gw.row(base_rows + r) + d, row_g.v.begin());
                    sgd_step(row_p, row_g, lr);
                    std::copy(row_p.v.begin(), row_p.v.end(), softmax_full.row(base_rows + r));
                }
                break;
            }
        }
        // few-shot box batches are tiny; the inverse-u^2 data term needs a
        // tighter clip than the abundant-data stages
        box_step(m, scenes, all_idx, spec.box_mode, true, false, lr,
                 config.get_double("train.grad_clip_finetune"),
                 config.get_double("train.lr_refiner_finetune_scale"), "finetune/box", it);
        mask_step(m, scenes, all_idx, lr, "finetune/mask", it);
    }

    if (spec.classifier == ClassifierMode::softmax) {
        m.softmax_w = Mat(n_rows + 1, d);
        for (std::size_t r = 0; r < n_rows; ++r)
            std::copy(softmax_full.row(base_rows + r), softmax_full.row(base_rows + r) + d,
                      m.softmax_w.row(r));
        std::copy(softmax_full.row(base_rows + n_rows), softmax_full.row(base_rows + n_rows) + d,
                  m.softmax_w.row(n_rows));  // frozen background row travels along
    }
    return m;
}

Model merge_checkpoints(const Model& base, const Model& fresh) {
    require(base.trunk && fresh.trunk, "merge: missing trunk");
    require(base.trunk->fingerprint() == fresh.trunk->fingerprint(), "merge: trunk mismatch");
    require(base.config.get("variant") == fresh.config.get("variant"),
            "merge: checkpoints come from different variants");
    require(base.box_ref1.v == fresh.box_ref1.v, "merge: shared refiner layer mismatch");
    for (const auto& b : base.registry)
        for (const auto& n : fresh.registry)
            require(b.id != n.id, "merge: overlapping class ids");

    Model m;
    m.config = fresh.config;
    m.trunk = base.trunk;
    m.registry = base.registry;
    m.registry.insert(m.registry.end(), fresh.registry.begin(), fresh.registry.end());

    const std::size_t d = base.post.mu.cols;
    const std::size_t rows = m.registry.size();
    m.post.mu = Mat(rows, d);
    m.post.rho = Mat(rows, d);
    m.post.has_var.assign(rows, 0);
    for (std::size_t r = 0; r < base.registry.size(); ++r) {
        std::copy(base.post.mu.row(r), base.post.mu.row(r) + d, m.post.mu.row(r));
        // base rows: exactly zero variance, no rho
    }
    for (std::size_t r = 0; r < fresh.registry.size(); ++r) {
        const std::size_t at = base.registry.size() + r;
        std::copy(fresh.post.mu.row(r), fresh.post.mu.row(r) + d, m.post.mu.row(at));
        std::copy(fresh.post.rho.row(r), fresh.post.rho.row(r) + d, m.post.rho.row(at));
        m.post.has_var[at] = fresh.post.has_var[r];
    }

    m.box_ref1 = base.box_ref1;
    m.box_pred = base.box_pred;
    m.box_pred.insert(m.box_pred.end(), fresh.box_pred.begin(), fresh.box_pred.end());
    m.box_ref2 = base.box_ref2;
    m.box_ref2.insert(m.box_ref2.end(), fresh.box_ref2.begin(), fresh.box_ref2.end());

    m.mask_head.W = Mat(rows, base.mask_head.W.cols);
    for (std::size_t r = 0; r < base.registry.size(); ++r)
        std::copy(base.mask_head.W.row(r), base.mask_head.W.row(r) + base.mask_head.W.cols,
                  m.mask_head.W.row(r));
    for (std::size_t r = 0; r < fresh.registry.size(); ++r)
        std::copy(fresh.mask_head.W.row(r), fresh.mask_head.W.row(r) + fresh.mask_head.W.cols,
                  m.mask_head.W.row(base.registry.size() + r));

    if (base.spec().classifier == ClassifierMode::softmax) {
        require(fresh.softmax_w.rows == fresh.registry.size() + 1, "merge: softmax rows missing");
        m.softmax_w = Mat(rows + 1, d);
        for (std::size_t r = 0; r < base.registry.size(); ++r)
            std::copy(base.softmax_w.row(r), base.softmax_w.row(r) + d, m.softmax_w.row(r));
        for (std::size_t r = 0; r < fresh.registry.size(); ++r)
            std::copy(fresh.softmax_w.row(r), fresh.softmax_w.row(r) + d,
                      m.softmax_w.row(base.registry.size() + r));
        std::copy(base.softmax_w.row(base.registry.size()),
                  base.softmax_w.row(base.registry.size()) + d, m.softmax_w.row(rows));
    }
    return m;
}

std::vector<world::Detection> detect_scene(const Model& m, const world::Scene& s) {
    const auto& spec = m.spec();
    const auto& wc = m.trunk->config();
    const double filter = m.config.get_double("thresholds.score_filter");
    const double nms_iou = m.config.get_double("thresholds.nms_iou");
    const auto cap = static_cast<std::size_t>(m.config.get_int("eval.max_dets_per_class"));
    const auto mc_samples = static_cast<std::size_t>(m.config.get_int("probit.mc_infer_samples"));
    const auto seed = static_cast<std::uint64_t>(m.config.get_int("seed"));

    auto props = world::make_proposals(wc, s);
    std::vector<world::Detection> raw;

    for (std::size_t pi = 0; pi < props.size(); ++pi) {
        const Feature f = m.trunk->extract(s, props[pi].bbox);

        std::vector<double> scores;
        switch (spec.classifier) {
            case ClassifierMode::softmax: {
                auto probs = cls::softmax_scores(f, m.softmax_w);
                scores.assign(probs.begin(), probs.end() - 1);  // drop background
                break;
            }
            case ClassifierMode::mc: {
                scores.resize(m.registry.size());
                std::vector<double> sigma2(f.size());
                for (std::size_t r = 0; r < m.registry.size(); ++r) {
                    const double mean_a = kern::dot(f.data(), m.post.mu.row(r), f.size());
                    if (!m.post.row_has_var(r)) {
                        scores[r] = probit::sigmoid(mean_a);
                        continue;
                    }
                    kern::softplus_many(m.post.rho.row(r), sigma2.data(), f.size());
                    const double var_a = kern::dot_sq(f.data(), sigma2.data(), f.size());
                    std::uint64_t h = hash_combine(fnv1a64(&seed, sizeof(seed)), s.seed);
                    h = hash_combine(h, pi);
                    h = hash_combine(h, static_cast<std::uint64_t>(m.registry[r].id));
                    scores[r] = probit::predictive_mc({mean_a, var_a}, mc_samples, h);
                }
                break;
            }
            default:
                scores = cls::class_scores_probit(f, m.post);
        }

        for (std::size_t r = 0; r < m.registry.size(); ++r) {
            if (scores[r] < filter) continue;
            const auto bp = box::predict_box(f, m.box_pred[r], m.config.get_double("box.u_floor"));
            auto bbox = initial_box(props[pi].bbox, bp.m);
            if (spec.refine_at_test) {
                const Feature f2 = m.trunk->extract(s, bbox);
                const auto b = box::refine_box(f2, bp.u, m.box_ref1, m.box_ref2[r],
                                               spec.box_mode == box::BoxMode::uncert);
                bbox = initial_box(bbox, b);
            }
            if (!bbox.valid() || bbox.width() < 1e-6 || bbox.height() < 1e-6) continue;

            world::Detection det;
            det.class_id = m.registry[r].id;
            det.score = scores[r];
            det.bbox = bbox;
            const auto cells = m.trunk->mask_cells(s, bbox, wc.mask_grid);
            det.mask = mask::binarize(
                mask::mask_probs(mask::mask_logits(cells, static_cast<std::size_t>(r), m.mask_head)));
            raw.push_back(std::move(det));
        }
    }

    auto kept = world::nms(raw, nms_iou);
    std::vector<std::size_t> per_class(wc.classes() + 1, 0);
    std::vector<world::Detection> out;
    for (auto& det : kept) {
        auto& count = per_class[static_cast<std::size_t>(det.class_id)];
        if (count >= cap) continue;
        ++count;
        out.push_back(std::move(det));
    }
    return out;
}

std::vector<std::vector<world::Detection>> detect_scenes(const Model& m,
                                                         const std::vector<world::Scene>& scenes,
                                                         std::size_t workers) {
    std::vector<std::vector<world::Detection>> out(scenes.size());
    workers = std::max<std::size_t>(1, std::min(workers, scenes.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < scenes.size(); ++i) out[i] = detect_scene(m, scenes[i]);
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < scenes.size(); i += workers)
                out[i] = detect_scene(m, scenes[i]);
        });
    }
    for (auto& t : pool) t.join();
    return out;
}

std::vector<MetricRow> evaluate_model(const Model& m,
                                      const std::vector<std::vector<world::Detection>>& dets,
                                      const std::vector<world::Scene>& test_scenes) {
    std::vector<int> new_ids, base_ids, all_ids;
    for (const auto& e : m.registry) {
        (e.is_base ? base_ids : new_ids).push_back(e.id);
        all_ids.push_back(e.id);
    }
    const auto grid = world::default_iou_grid();

    std::vector<MetricRow> rows;
    const std::string variant = m.config.get("variant");
    const long k = m.config.get_int("world.k_shots");
    const long seed = m.config.get_int("seed");
    const auto add = [&](const std::string& split, const std::string& metric, double v) {
        rows.push_back({variant, k, seed, split, metric, v});
    };

    for (auto mode : {world::ApMode::box, world::ApMode::mask}) {
        const std::string metric = mode == world::ApMode::box ? "box_ap" : "mask_ap";
        add("new", metric,
            world::average_precision(dets, test_scenes, *m.trunk, mode, new_ids, grid));
        add("base", metric,
            world::average_precision(dets, test_scenes, *m.trunk, mode, base_ids, grid));
        add("all", metric,
            world::average_precision(dets, test_scenes, *m.trunk, mode, all_ids, grid));
    }
    return rows;
}

std::vector<MetricRow> run_variant(const std::string& variant, cfg::Config config,
                                   std::size_t eval_workers) {
    config.set("variant", variant);
    config.validate();

    const auto ds = world::generate_dataset(config.world_config());
    const Model base = pretrain_base(ds.base, config);
    const Model fresh = finetune_new(base, ds.shots, config);
    const Model merged = merge_checkpoints(base, fresh);
    const auto dets = detect_scenes(merged, ds.test, eval_workers);
    return evaluate_model(merged, dets, ds.test);
}

}  // namespace ifsr::proto
