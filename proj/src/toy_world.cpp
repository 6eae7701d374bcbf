#include "ifsr/toy_world.hpp"

#include <algorithm>
#include <cmath>

#include "ifsr/kernels.hpp"
#include "ifsr/rng.hpp"

namespace ifsr::world {
namespace {

constexpr std::uint64_t kFeatureTag = 0xFEA70001ull;
constexpr std::uint64_t kMaskTag = 0x3A5C0002ull;
constexpr std::uint64_t kPropsTag = 0x9B0B0003ull;

std::uint64_t box_stream_seed(std::uint64_t scene_seed, const box::SideBox& b, std::uint64_t tag) {
    std::uint64_t h = hash_combine(fnv1a64(&scene_seed, sizeof(scene_seed)), tag);
    h = hash_double_bits(h, b.l);
    h = hash_double_bits(h, b.t);
    h = hash_double_bits(h, b.r);
    h = hash_double_bits(h, b.b);
    return h;
}

Mat random_mat(Rng& rng, std::size_t r, std::size_t c, double scale) {
    Mat m(r, c);
    for (auto& x : m.v) x = rng.normal(0.0, scale);
    return m;
}

// point inside the object's elliptical occupancy, full extent
double ellipse_signal(const SceneObject& o, double x, double y) {
    const double cx = 0.5 * (o.bbox.l + o.bbox.r);
    const double cy = 0.5 * (o.bbox.t + o.bbox.b);
    const double ax = 0.5 * o.bbox.width();
    const double ay = 0.5 * o.bbox.height();
    const double rx = (x - cx) / ax;
    const double ry = (y - cy) / ay;
    return std::clamp(1.0 - (rx * rx + ry * ry), -2.0, 2.0);
}

bool point_visible(const SceneObject& o, double x, double y) {
    if (!o.occl.occluded) return true;
    const auto vis = o.visible_box();
    return x >= vis.l && x <= vis.r && y >= vis.t && y <= vis.b;
}

}  // namespace

box::SideBox SceneObject::visible_box() const {
    box::SideBox v = bbox;
    if (!occl.occluded) return v;
    const double w = bbox.width(), h = bbox.height();
    switch (occl.side) {
        case 0: v.l += occl.fraction * w; break;
        case 1: v.t += occl.fraction * h; break;
        case 2: v.r -= occl.fraction * w; break;
        default: v.b -= occl.fraction * h; break;
    }
    return v;
}

double iou(const box::SideBox& a, const box::SideBox& b) {
    const double il = std::max(a.l, b.l);
    const double it = std::max(a.t, b.t);
    const double ir = std::min(a.r, b.r);
    const double ib = std::min(a.b, b.b);
    if (il >= ir || it >= ib) return 0.0;
    const double inter = (ir - il) * (ib - it);
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double class_aspect(const WorldConfig& cfg, int class_id) {
    const std::uint64_t root = fnv1a64(&cfg.seed, sizeof(cfg.seed));
    Rng rng(hash_combine(hash_combine(root, 0xA59Cull), static_cast<std::uint64_t>(class_id)));
    return rng.uniform(-cfg.aspect_spread, cfg.aspect_spread);
}

namespace {

Scene make_scene(const WorldConfig& cfg, std::uint64_t seed, int class_lo, int class_hi,
                 std::size_t forced_count = 0, int forced_class = -1) {
    Scene s;
    s.seed = seed;
    Rng rng(seed);
    const std::size_t count =
        forced_count > 0
            ? forced_count
            : cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);

    for (std::size_t i = 0; i < count; ++i) {
        SceneObject obj;
        obj.class_id = forced_class >= 0
                           ? forced_class
                           : class_lo + static_cast<int>(rng.below(class_hi - class_lo));
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            // class-typical shape: size times the canonical aspect with jitter
            const double size = rng.uniform(cfg.size_min, cfg.size_max);
            const double la = class_aspect(cfg, obj.class_id) + rng.normal(0.0, cfg.aspect_sd);
            double w = size * std::exp(0.5 * la);
            double h = size * std::exp(-0.5 * la);
            w = std::clamp(w, 0.06, 0.5);
            h = std::clamp(h, 0.06, 0.5);
            const double cx = rng.uniform(0.01 + w / 2, 0.99 - w / 2);
            const double cy = rng.uniform(0.01 + h / 2, 0.99 - h / 2);
            obj.bbox = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
            placed = true;
            for (const auto& other : s.objects)
                if (iou(obj.bbox, other.bbox) > 0.5) placed = false;
        }
        if (!placed)
            throw std::invalid_argument("generate_dataset: infeasible geometry, too many objects");
        if (rng.uniform() < cfg.occlusion_frac) {
            obj.occl.occluded = true;
            obj.occl.side = static_cast<int>(rng.below(4));
            obj.occl.fraction = rng.uniform(cfg.occl_min, cfg.occl_max);
        }
        obj.appearance_seed = rng.next_u64();
        s.objects.push_back(obj);
    }
    return s;
}

}  // namespace

Dataset generate_dataset(const WorldConfig& cfg) {
    require(cfg.shots >= 1 && cfg.n_base >= 1 && cfg.n_new >= 1, "generate_dataset: bad split");
    require(cfg.min_objects >= 1 && cfg.max_objects >= cfg.min_objects,
            "generate_dataset: bad object counts");

    Dataset ds;
    const std::uint64_t root = fnv1a64(&cfg.seed, sizeof(cfg.seed));
    for (std::size_t i = 0; i < cfg.base_scenes; ++i)
        ds.base.push_back(make_scene(cfg, hash_combine(root, 0x100000 + i), 0,
                                     static_cast<int>(cfg.n_base)));

    // one object per shot scene keeps the per-class instance count exact
    for (std::size_t c = 0; c < cfg.n_new; ++c)
        for (std::size_t k = 0; k < cfg.shots; ++k)
            ds.shots.push_back(make_scene(cfg, hash_combine(root, 0x200000 + c * 4096 + k), 0, 0, 1,
                                          static_cast<int>(cfg.n_base + c)));

    for (std::size_t i = 0; i < cfg.test_scenes; ++i)
        ds.test.push_back(make_scene(cfg, hash_combine(root, 0x300000 + i), 0,
                                     static_cast<int>(cfg.classes())));
    return ds;
}

World::World(const WorldConfig& cfg) : cfg_(cfg) {
    require(cfg.proto_dim >= cfg.classes(), "World: proto_dim must cover all classes");
    const std::uint64_t root = fnv1a64(&cfg.seed, sizeof(cfg.seed));
    Rng proto_rng(hash_combine(root, 0xAA01));
    // orthonormal class prototypes (Gram-Schmidt on Gaussian draws) keep class
    // separability homogeneous across world seeds
    protos_ = random_mat(proto_rng, cfg.classes(), cfg.proto_dim, 1.0);
    for (std::size_t c = 0; c < protos_.rows; ++c) {
        double* row = protos_.row(c);
        for (std::size_t p = 0; p < c; ++p) {
            const double* prev = protos_.row(p);
            const double proj = kern::dot(row, prev, cfg.proto_dim);
            kern::axpy(-proj, prev, row, cfg.proto_dim);
        }
        const double norm = std::sqrt(kern::dot(row, row, cfg.proto_dim));
        require(norm > 1e-9, "World: degenerate prototype draw");
        for (std::size_t j = 0; j < cfg.proto_dim; ++j) row[j] *= cfg.proto_gain / norm;
    }

    Rng ext_rng(hash_combine(root, 0xAA02));
    const std::size_t raw = cfg.raw_dim();
    const std::size_t core = cfg.feat_dim - 1;
    require(core == raw, "World: feat_dim must be raw_dim + 1");
    // diagonal-dominant mixing keeps feature channels roughly axis-aligned,
    // which a diagonal weight posterior can exploit
    w1_ = random_mat(ext_rng, raw, raw, cfg.extractor_mix / std::sqrt(static_cast<double>(raw)));
    for (std::size_t j = 0; j < raw; ++j) w1_.at(j, j) += 1.0;
    b1_ = random_mat(ext_rng, 1, raw, 0.1);
    w2_ = random_mat(ext_rng, core, raw, cfg.extractor_mix / std::sqrt(static_cast<double>(raw)));
    for (std::size_t j = 0; j < core; ++j) w2_.at(j, j) += 1.0;
    b2_ = random_mat(ext_rng, 1, core, 0.1);
}

World::World(const WorldConfig& cfg, Mat protos, Mat w1, Mat b1, Mat w2, Mat b2)
    : cfg_(cfg),
      protos_(std::move(protos)),
      w1_(std::move(w1)),
      b1_(std::move(b1)),
      w2_(std::move(w2)),
      b2_(std::move(b2)) {
    require(protos_.rows == cfg.classes() && protos_.cols == cfg.proto_dim,
            "World: prototype block shape mismatch");
    require(w1_.rows == cfg.raw_dim() && w1_.cols == cfg.raw_dim(),
            "World: extractor shape mismatch");
    require(w2_.rows == cfg.feat_dim - 1 && w2_.cols == cfg.raw_dim(),
            "World: extractor shape mismatch");
}

std::pair<int, double> World::dominant(const Scene& s, const box::SideBox& b) const {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        const double v = iou(b, s.objects[i].visible_box());
        if (v > best_iou) {
            best_iou = v;
            best = static_cast<int>(i);
        }
    }
    return {best, best_iou};
}

std::vector<double> World::raw_input(const Scene& s, const box::SideBox& b) const {
    require(b.valid(), "raw_input: degenerate query box");
    std::vector<double> raw(cfg_.raw_dim(), 0.0);
    const std::size_t p = cfg_.proto_dim;

    const auto [idx, overlap] = dominant(s, b);
    if (idx >= 0) {
        const SceneObject& obj = s.objects[idx];
        // instance appearance: class prototype plus a per-object offset shared
        // by every view of the object
        Rng app(obj.appearance_seed);
        const double proto_scale = cfg_.proto_overlap_scaling ? overlap : 1.0;
        for (std::size_t j = 0; j < p; ++j)
            raw[j] = (protos_.at(obj.class_id, j) + app.normal(0.0, cfg_.instance_sd)) * proto_scale;
        const auto g = box::encode_offsets(b, obj.visible_box());
        // saturating encoding: small offsets are readable, large stretches
        // are ambiguous from geometry alone (like a finite receptive field)
        for (int k = 0; k < 4; ++k)
            raw[p + k] = std::tanh(g[k] / cfg_.geom_sat) * cfg_.geom_sat;
        // which side the occluder cuts is visible; how much is hidden is not
        if (obj.occl.occluded) raw[p + 4 + obj.occl.side] = 1.0;
        raw[p + 8] = overlap;
    }
    raw[p + 9] = std::log(b.width() / 0.2);
    raw[p + 10] = std::log(b.height() / 0.2);

    Rng noise(box_stream_seed(s.seed, b, kFeatureTag));
    for (std::size_t j = 0; j < cfg_.noise_dim; ++j)
        raw[p + 11 + j] = noise.normal(0.0, cfg_.noise_scale);
    return raw;
}

Feature World::extract(const Scene& s, const box::SideBox& b) const {
    const auto raw = raw_input(s, b);
    const double sq = cfg_.extractor_squash;
    std::vector<double> hidden(raw.size());
    for (std::size_t j = 0; j < hidden.size(); ++j)
        hidden[j] = std::tanh(sq * (kern::dot(w1_.row(j), raw.data(), raw.size()) + b1_.v[j])) / sq;

    Feature f(cfg_.feat_dim);
    for (std::size_t j = 0; j + 1 < cfg_.feat_dim; ++j)
        f[j] = cfg_.feat_scale *
               std::tanh(sq * (kern::dot(w2_.row(j), hidden.data(), hidden.size()) + b2_.v[j])) / sq;
    f[cfg_.feat_dim - 1] = 1.0;
    return f;
}

Mat World::mask_cells(const Scene& s, const box::SideBox& roi, std::size_t grid) const {
    require(roi.valid(), "mask_cells: degenerate roi");
    const std::size_t dm = cfg_.mask_feat_dim;
    Mat cells(grid * grid, dm);

    const auto [idx, overlap] = dominant(s, roi);
    Rng noise(box_stream_seed(s.seed, roi, kMaskTag));
    const double w = roi.width(), h = roi.height();

    for (std::size_t yy = 0; yy < grid; ++yy) {
        for (std::size_t xx = 0; xx < grid; ++xx) {
            double* cell = cells.row(yy * grid + xx);
            const double x = roi.l + (xx + 0.5) / grid * w;
            const double y = roi.t + (yy + 0.5) / grid * h;
            double sig = -1.0, occ = 0.0, q0 = 0.0, q1 = 0.0;
            if (idx >= 0) {
                const SceneObject& obj = s.objects[idx];
                if (point_visible(obj, x, y)) {
                    sig = ellipse_signal(obj, x, y);
                } else {
                    occ = 1.0;  // hidden area reads as background with a cue
                }
                q0 = protos_.at(obj.class_id, 0);
                q1 = protos_.at(obj.class_id, 1);
            }
            cell[0] = sig;
            cell[1] = occ;
            cell[2] = overlap;
            cell[3] = q0;
            cell[4] = q1;
            cell[5] = noise.normal(0.0, cfg_.noise_scale);
            cell[6] = noise.normal(0.0, cfg_.noise_scale);
            cell[7] = 1.0;
        }
    }
    return cells;
}

Mat World::gt_mask_grid(const Scene& s, std::size_t obj, const box::SideBox& roi,
                        std::size_t grid) const {
    require(obj < s.objects.size(), "gt_mask_grid: bad object index");
    const SceneObject& o = s.objects[obj];
    Mat gt(grid, grid);
    for (std::size_t yy = 0; yy < grid; ++yy) {
        for (std::size_t xx = 0; xx < grid; ++xx) {
            const double x = roi.l + (xx + 0.5) / grid * roi.width();
            const double y = roi.t + (yy + 0.5) / grid * roi.height();
            gt.at(yy, xx) =
                ellipse_signal(o, x, y) > 0.0 && point_visible(o, x, y) ? 1.0 : 0.0;
        }
    }
    return gt;
}

std::uint64_t World::fingerprint() const {
    std::uint64_t h = fnv1a64("ifsr-trunk");
    for (const Mat* m : {&protos_, &w1_, &b1_, &w2_, &b2_}) {
        h = hash_combine(h, m->rows);
        h = hash_combine(h, m->cols);
        for (double x : m->v) h = hash_double_bits(h, x);
    }
    return h;
}

std::vector<Proposal> make_proposals(const WorldConfig& cfg, const Scene& s) {
    std::vector<Proposal> props;
    Rng rng(hash_combine(fnv1a64(&s.seed, sizeof(s.seed)), kPropsTag));

    const std::size_t n_pos =
        cfg.proposals_per_scene > cfg.negative_proposals
            ? cfg.proposals_per_scene - cfg.negative_proposals
            : 0;

    if (!s.objects.empty()) {
        // jittered ground-truth boxes; for occluded objects the proposer has
        // only partial amodal ability, so each proposal lands somewhere
        // between the visible extent and the full annotated extent
        for (std::size_t i = 0; i < n_pos; ++i) {
            const SceneObject& obj = s.objects[i % s.objects.size()];
            const auto vis = obj.visible_box();
            const auto& full = obj.bbox;
            const double c = rng.uniform();
            box::SideBox mid{vis.l + c * (full.l - vis.l), vis.t + c * (full.t - vis.t),
                             vis.r + c * (full.r - vis.r), vis.b + c * (full.b - vis.b)};
            box::SideBox b;
            for (int attempt = 0; attempt < 50; ++attempt) {
                b.l = mid.l + rng.normal(0.0, cfg.jitter_sigma * mid.width());
                b.r = mid.r + rng.normal(0.0, cfg.jitter_sigma * mid.width());
                b.t = mid.t + rng.normal(0.0, cfg.jitter_sigma * mid.height());
                b.b = mid.b + rng.normal(0.0, cfg.jitter_sigma * mid.height());
                b.l = std::clamp(b.l, 0.0, 1.0);
                b.t = std::clamp(b.t, 0.0, 1.0);
                b.r = std::clamp(b.r, 0.0, 1.0);
                b.b = std::clamp(b.b, 0.0, 1.0);
                if (b.width() > 0.02 && b.height() > 0.02) break;
            }
            if (b.width() <= 0.02 || b.height() <= 0.02) b = mid;
            props.push_back({b, -1, 0.0});
        }
    }
    while (props.size() < cfg.proposals_per_scene) {
        const double w = rng.uniform(0.08, 0.4);
        const double h = rng.uniform(0.08, 0.4);
        const double cx = rng.uniform(w / 2, 1.0 - w / 2);
        const double cy = rng.uniform(h / 2, 1.0 - h / 2);
        props.push_back({{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, -1, 0.0});
    }
    return props;
}

void match_proposals(std::vector<Proposal>& proposals, const Scene& s, double iou_threshold) {
    require(iou_threshold > 0.0 && iou_threshold < 1.0, "match_proposals: bad threshold");
    for (auto& p : proposals) {
        p.matched_gt = -1;
        p.match_iou = 0.0;
        for (std::size_t i = 0; i < s.objects.size(); ++i) {
            const double v = iou(p.bbox, s.objects[i].bbox);
            if (v > p.match_iou) {  // strict: ties keep the lowest gt index
                p.match_iou = v;
                p.matched_gt = static_cast<int>(i);
            }
        }
        if (p.match_iou < iou_threshold) p.matched_gt = -1;
    }
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        if (dets[a].class_id != dets[b].class_id) return dets[a].class_id < dets[b].class_id;
        return a < b;
    });

    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (std::size_t k : kept) {
            if (dets[k].class_id != dets[idx].class_id) continue;
            if (iou(dets[k].bbox, dets[idx].bbox) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(idx);
    }

    std::vector<Detection> out;
    out.reserve(kept.size());
    for (std::size_t idx : kept) out.push_back(dets[idx]);
    return out;
}

}  // namespace ifsr::world
