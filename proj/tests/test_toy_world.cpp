#include <doctest.h>

#include <cmath>

#include "ifsr/evaluator.hpp"
#include "ifsr/rng.hpp"
#include "ifsr/toy_world.hpp"

using namespace ifsr;
using namespace ifsr::world;

namespace {

WorldConfig small_config() {
    WorldConfig cfg;
    cfg.seed = 7;
    cfg.base_scenes = 6;
    cfg.test_scenes = 5;
    cfg.shots = 3;
    return cfg;
}

bool same_scene(const Scene& a, const Scene& b) {
    if (a.seed != b.seed || a.objects.size() != b.objects.size()) return false;
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
        const auto& x = a.objects[i];
        const auto& y = b.objects[i];
        if (x.class_id != y.class_id || x.bbox.l != y.bbox.l || x.bbox.r != y.bbox.r ||
            x.bbox.t != y.bbox.t || x.bbox.b != y.bbox.b || x.occl.occluded != y.occl.occluded ||
            x.occl.side != y.occl.side || x.occl.fraction != y.occl.fraction)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("iou") {
    box::SideBox a{0.0, 0.0, 2.0, 2.0};
    CHECK(iou(a, a) == 1.0);

    box::SideBox far{3.0, 3.0, 4.0, 4.0};
    CHECK(iou(a, far) == 0.0);

    box::SideBox b{1.0, 1.0, 3.0, 3.0};
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));

    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        box::SideBox p{rng.uniform(0, 0.5), rng.uniform(0, 0.5), 0, 0};
        p.r = p.l + rng.uniform(0.05, 0.5);
        p.b = p.t + rng.uniform(0.05, 0.5);
        box::SideBox q{rng.uniform(0, 0.5), rng.uniform(0, 0.5), 0, 0};
        q.r = q.l + rng.uniform(0.05, 0.5);
        q.b = q.t + rng.uniform(0.05, 0.5);
        CHECK(iou(p, q) == iou(q, p));
        CHECK(iou(p, p) == 1.0);
        const double dx = rng.uniform(-0.2, 0.2), dy = rng.uniform(-0.2, 0.2);
        box::SideBox p2{p.l + dx, p.t + dy, p.r + dx, p.b + dy};
        box::SideBox q2{q.l + dx, q.t + dy, q.r + dx, q.b + dy};
        CHECK(iou(p2, q2) == doctest::Approx(iou(p, q)).epsilon(1e-12));
    }
}

TEST_CASE("dataset generation") {
    auto cfg = small_config();
    auto d1 = generate_dataset(cfg);
    auto d2 = generate_dataset(cfg);

    REQUIRE(d1.base.size() == cfg.base_scenes);
    REQUIRE(d1.test.size() == cfg.test_scenes);
    REQUIRE(d1.shots.size() == cfg.shots * cfg.n_new);

    for (std::size_t i = 0; i < d1.base.size(); ++i) CHECK(same_scene(d1.base[i], d2.base[i]));
    for (std::size_t i = 0; i < d1.shots.size(); ++i) CHECK(same_scene(d1.shots[i], d2.shots[i]));
    for (std::size_t i = 0; i < d1.test.size(); ++i) CHECK(same_scene(d1.test[i], d2.test[i]));

    // exactly K instances per new class, none of anything else
    std::vector<int> counts(cfg.classes(), 0);
    for (const auto& s : d1.shots)
        for (const auto& o : s.objects) ++counts[o.class_id];
    for (std::size_t c = 0; c < cfg.n_base; ++c) CHECK(counts[c] == 0);
    for (std::size_t c = cfg.n_base; c < cfg.classes(); ++c)
        CHECK(counts[c] == static_cast<int>(cfg.shots));

    // base scenes hold only base classes; boxes inside the canvas
    for (const auto& s : d1.base) {
        CHECK(!s.objects.empty());
        for (const auto& o : s.objects) {
            CHECK(o.class_id < static_cast<int>(cfg.n_base));
            CHECK(o.bbox.l >= 0.0);
            CHECK(o.bbox.t >= 0.0);
            CHECK(o.bbox.r <= 1.0);
            CHECK(o.bbox.b <= 1.0);
            CHECK(o.bbox.valid());
        }
    }

    auto cfg2 = cfg;
    cfg2.seed = 8;
    auto d3 = generate_dataset(cfg2);
    CHECK(!same_scene(d1.base[0], d3.base[0]));

    // more large objects than the overlap bound can place
    auto crowded = cfg;
    crowded.min_objects = 40;
    crowded.max_objects = 40;
    crowded.size_min = 0.45;
    crowded.size_max = 0.45;
    CHECK_THROWS_AS(generate_dataset(crowded), std::invalid_argument);
}

TEST_CASE("feature extraction") {
    auto cfg = small_config();
    World w(cfg);
    auto ds = generate_dataset(cfg);
    const Scene& s = ds.base[0];
    const auto& obj = s.objects[0];

    SUBCASE("determinism") {
        auto f1 = w.extract(s, obj.bbox);
        auto f2 = w.extract(s, obj.bbox);
        REQUIRE(f1.size() == cfg.feat_dim);
        for (std::size_t j = 0; j < f1.size(); ++j) CHECK(f1[j] == f2[j]);
        CHECK(f1.back() == 1.0);
    }

    SUBCASE("background boxes carry no prototype component") {
        Scene empty;
        empty.seed = 99;
        auto raw = w.raw_input(empty, {0.4, 0.4, 0.6, 0.6});
        for (std::size_t j = 0; j < cfg.proto_dim + 9; ++j) CHECK(raw[j] == 0.0);
        bool any_noise = false;
        for (std::size_t j = cfg.proto_dim + 9; j < raw.size(); ++j) any_noise |= raw[j] != 0.0;
        CHECK(any_noise);
    }

    SUBCASE("same class, exact visible box, zero noise: equal prototype parts") {
        auto cfg0 = cfg;
        cfg0.noise_scale = 0.0;
        cfg0.instance_sd = 0.0;  // appearance scatter is a noise source too
        World w0(cfg0);
        auto d0 = generate_dataset(cfg0);
        // find two objects of the same class in different scenes
        for (const auto& sa : d0.base) {
            for (const auto& sb : d0.base) {
                for (const auto& oa : sa.objects) {
                    for (const auto& ob : sb.objects) {
                        if (&oa == &ob || oa.class_id != ob.class_id) continue;
                        auto ra = w0.raw_input(sa, oa.visible_box());
                        auto rb = w0.raw_input(sb, ob.visible_box());
                        for (std::size_t j = 0; j < cfg.proto_dim; ++j) CHECK(ra[j] == rb[j]);
                        return;  // one pair is enough
                    }
                }
            }
        }
    }

    SUBCASE("rebuild from trunk blocks preserves everything") {
        World w2(cfg, w.prototypes(), w.w1(), w.b1(), w.w2(), w.b2());
        CHECK(w2.fingerprint() == w.fingerprint());
        auto f1 = w.extract(s, obj.bbox);
        auto f2 = w2.extract(s, obj.bbox);
        for (std::size_t j = 0; j < f1.size(); ++j) CHECK(f1[j] == f2[j]);
    }
}

TEST_CASE("proposals and matching") {
    auto cfg = small_config();
    auto ds = generate_dataset(cfg);
    const Scene& s = ds.base[1];

    auto p1 = make_proposals(cfg, s);
    auto p2 = make_proposals(cfg, s);
    REQUIRE(p1.size() == cfg.proposals_per_scene);
    for (std::size_t i = 0; i < p1.size(); ++i) {
        CHECK(p1[i].bbox.l == p2[i].bbox.l);
        CHECK(p1[i].bbox.valid());
    }

    SUBCASE("exact gt proposal matches at iou 1") {
        std::vector<Proposal> props{{s.objects[0].bbox, -1, 0.0}};
        match_proposals(props, s, 0.5);
        CHECK(props[0].matched_gt == 0);
        CHECK(props[0].match_iou == 1.0);
    }

    SUBCASE("empty scene leaves everything background") {
        Scene empty;
        empty.seed = 4;
        auto props = make_proposals(cfg, empty);
        match_proposals(props, empty, 0.5);
        for (const auto& p : props) CHECK(p.matched_gt == -1);
    }

    SUBCASE("threshold must lie in (0,1)") {
        auto props = make_proposals(cfg, s);
        CHECK_THROWS_AS(match_proposals(props, s, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(match_proposals(props, s, 1.0), std::invalid_argument);
    }

    SUBCASE("ties go to the lowest gt index") {
        Scene twin;
        twin.seed = 5;
        SceneObject o;
        o.class_id = 0;
        o.bbox = {0.2, 0.2, 0.5, 0.5};
        twin.objects = {o, o};  // identical boxes
        std::vector<Proposal> props{{o.bbox, -1, 0.0}};
        match_proposals(props, twin, 0.5);
        CHECK(props[0].matched_gt == 0);
    }
}

TEST_CASE("nms") {
    std::vector<Detection> dets;
    CHECK(nms(dets, 0.5).empty());

    Detection d1{0, 0.9, {0.1, 0.1, 0.5, 0.5}, {}};
    Detection d2{0, 0.8, {0.12, 0.1, 0.52, 0.5}, {}};  // heavy overlap with d1
    const double v = iou(d1.bbox, d2.bbox);
    REQUIRE(v > 0.5);

    auto kept = nms({d1, d2}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);

    // different classes never suppress each other
    d2.class_id = 1;
    kept = nms({d1, d2}, 0.5);
    CHECK(kept.size() == 2);

    // survivors of one class stay below the threshold pairwise
    Rng rng(17);
    std::vector<Detection> many;
    for (int i = 0; i < 40; ++i) {
        Detection d;
        d.class_id = static_cast<int>(rng.below(3));
        d.score = rng.uniform(0.05, 1.0);
        d.bbox.l = rng.uniform(0.0, 0.6);
        d.bbox.t = rng.uniform(0.0, 0.6);
        d.bbox.r = d.bbox.l + rng.uniform(0.1, 0.4);
        d.bbox.b = d.bbox.t + rng.uniform(0.1, 0.4);
        many.push_back(d);
    }
    auto out = nms(many, 0.5);
    CHECK(out.size() <= many.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = i + 1; j < out.size(); ++j)
            if (out[i].class_id == out[j].class_id) CHECK(iou(out[i].bbox, out[j].bbox) <= 0.5);
}

TEST_CASE("mask grids") {
    auto cfg = small_config();
    World w(cfg);
    auto ds = generate_dataset(cfg);
    const Scene& s = ds.base[0];
    const auto& obj = s.objects[0];

    auto cells = w.mask_cells(s, obj.bbox, cfg.mask_grid);
    REQUIRE(cells.rows == cfg.mask_grid * cfg.mask_grid);
    REQUIRE(cells.cols == cfg.mask_feat_dim);

    auto gt = w.gt_mask_grid(s, 0, obj.bbox, cfg.mask_grid);
    // center of the object's own box is inside the ellipse unless occluded there
    const double frac =
        std::count(gt.v.begin(), gt.v.end(), 1.0) / static_cast<double>(gt.size());
    CHECK(frac > 0.3);   // ellipse fills pi/4 of its box, minus occlusion
    CHECK(frac < 0.95);

    // determinism of cell features
    auto again = w.mask_cells(s, obj.bbox, cfg.mask_grid);
    for (std::size_t i = 0; i < cells.size(); ++i) CHECK(cells.v[i] == again.v[i]);
}

namespace {

// random detections around the ground truth plus clutter, for evaluator tests
std::vector<std::vector<Detection>> random_detections(Rng& rng, const World& w,
                                                      const std::vector<Scene>& scenes,
                                                      bool with_masks) {
    std::vector<std::vector<Detection>> all;
    const auto g = w.config().mask_grid;
    for (const auto& s : scenes) {
        std::vector<Detection> dets;
        for (std::size_t oi = 0; oi < s.objects.size(); ++oi) {
            const auto& o = s.objects[oi];
            const int copies = 1 + static_cast<int>(rng.below(3));
            for (int c = 0; c < copies; ++c) {
                Detection d;
                d.class_id = rng.uniform() < 0.8
                                 ? o.class_id
                                 : static_cast<int>(rng.below(w.config().classes()));
                d.score = rng.uniform(0.05, 1.0);
                const double j = 0.02 + 0.1 * rng.uniform();
                d.bbox = {o.bbox.l + rng.normal(0, j), o.bbox.t + rng.normal(0, j),
                          o.bbox.r + rng.normal(0, j), o.bbox.b + rng.normal(0, j)};
                if (!d.bbox.valid()) d.bbox = o.bbox;
                if (with_masks) {
                    d.mask = Mat(g, g);
                    auto gt = w.gt_mask_grid(s, oi, d.bbox, g);
                    for (std::size_t i = 0; i < gt.size(); ++i)
                        d.mask.v[i] = rng.uniform() < 0.9 ? gt.v[i] : 1.0 - gt.v[i];
                }
                dets.push_back(d);
            }
        }
        // clutter
        for (int c = 0; c < 2; ++c) {
            Detection d;
            d.class_id = static_cast<int>(rng.below(w.config().classes()));
            d.score = rng.uniform(0.05, 1.0);
            d.bbox.l = rng.uniform(0.0, 0.6);
            d.bbox.t = rng.uniform(0.0, 0.6);
            d.bbox.r = d.bbox.l + rng.uniform(0.1, 0.4);
            d.bbox.b = d.bbox.t + rng.uniform(0.1, 0.4);
            if (with_masks) {
                d.mask = Mat(g, g);
                for (auto& m : d.mask.v) m = rng.below(2) ? 1.0 : 0.0;
            }
            dets.push_back(d);
        }
        all.push_back(dets);
    }
    return all;
}

}  // namespace

TEST_CASE("average precision basics") {
    auto cfg = small_config();
    World w(cfg);
    const auto grid = default_iou_grid();
    REQUIRE(grid.size() == 10);
    CHECK(grid.front() == doctest::Approx(0.5));
    CHECK(grid.back() == doctest::Approx(0.95));

    Scene s;
    s.seed = 1;
    SceneObject o;
    o.class_id = 0;
    o.bbox = {0.2, 0.2, 0.6, 0.6};
    s.objects = {o};

    SUBCASE("single near-perfect detection gives AP 1") {
        Detection d{0, 0.37, {0.201, 0.2, 0.6, 0.6}, {}};
        REQUIRE(iou(d.bbox, o.bbox) > 0.95);
        const double ap = average_precision({{d}}, {s}, w, ApMode::box, {0}, grid);
        CHECK(ap == 1.0);
    }

    SUBCASE("no detections gives AP 0") {
        CHECK(average_precision({{}}, {s}, w, ApMode::box, {0}, grid) == 0.0);
    }

    SUBCASE("a trailing false positive does not hurt under all-point interpolation") {
        Detection tp{0, 0.9, o.bbox, {}};
        Detection fp{0, 0.5, {0.7, 0.7, 0.9, 0.9}, {}};
        const double ap = average_precision({{tp, fp}}, {s}, w, ApMode::box, {0}, grid);
        CHECK(ap == 1.0);
    }

    SUBCASE("score rescaling that preserves ranking preserves AP") {
        Rng rng(23);
        auto ds = generate_dataset(cfg);
        auto dets = random_detections(rng, w, ds.test, false);
        std::vector<int> all_ids;
        for (std::size_t c = 0; c < cfg.classes(); ++c) all_ids.push_back(static_cast<int>(c));
        const double base = average_precision(dets, ds.test, w, ApMode::box, all_ids, grid);
        for (auto& sd : dets)
            for (auto& d : sd) d.score = 0.25 + 0.5 * d.score;  // monotone
        const double moved = average_precision(dets, ds.test, w, ApMode::box, all_ids, grid);
        CHECK(base == moved);
    }
}

TEST_CASE("evaluator agrees with the brute-force reference") {
    auto cfg = small_config();
    cfg.test_scenes = 5;
    World w(cfg);
    std::vector<int> all_ids;
    for (std::size_t c = 0; c < cfg.classes(); ++c) all_ids.push_back(static_cast<int>(c));
    const auto grid = default_iou_grid();

    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto cfg_i = cfg;
        cfg_i.seed = seed;
        auto ds = generate_dataset(cfg_i);
        Rng rng(seed * 131);
        auto dets = random_detections(rng, w, ds.test, true);

        const double fast_box = average_precision(dets, ds.test, w, ApMode::box, all_ids, grid);
        const double ref_box =
            reference_average_precision(dets, ds.test, w, ApMode::box, all_ids, grid);
        CHECK(std::fabs(fast_box - ref_box) < 1e-9);

        const double fast_mask = average_precision(dets, ds.test, w, ApMode::mask, all_ids, grid);
        const double ref_mask =
            reference_average_precision(dets, ds.test, w, ApMode::mask, all_ids, grid);
        CHECK(std::fabs(fast_mask - ref_mask) < 1e-9);
        CHECK(fast_box > 0.0);
        CHECK(fast_mask >= 0.0);
    }
}
