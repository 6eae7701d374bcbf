#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ifsr/probit.hpp"
#include "ifsr/protocol.hpp"

using namespace ifsr;
using namespace ifsr::proto;

namespace {

cfg::Config tiny_config(long seed = 3) {
    cfg::Config c;
    c.set("seed", std::to_string(seed));
    c.set("world.base_scenes", "40");
    c.set("world.test_scenes", "12");
    c.set("world.k_shots", "2");
    c.set("train.pretrain_iters", "150");
    c.set("train.phaseb_iters", "80");
    c.set("train.finetune_iters", "120");
    return c;
}

bool same_detections(const std::vector<world::Detection>& a,
                     const std::vector<world::Detection>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].class_id != b[i].class_id || a[i].score != b[i].score ||
            a[i].bbox.l != b[i].bbox.l || a[i].bbox.t != b[i].bbox.t ||
            a[i].bbox.r != b[i].bbox.r || a[i].bbox.b != b[i].bbox.b ||
            a[i].mask.v != b[i].mask.v)
            return false;
    }
    return true;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& p) : path(p) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("variant registry") {
    const auto& full = variant_spec("ifs_rcnn");
    CHECK(full.classifier == ClassifierMode::probit);
    CHECK(full.box_mode == box::BoxMode::uncert);
    CHECK(full.refine_at_test);

    const auto& base = variant_spec("mask_sigmoid");
    CHECK(base.classifier == ClassifierMode::point);
    CHECK(base.box_mode == box::BoxMode::plain);

    CHECK(all_variants().size() == 8);
    CHECK_THROWS_AS(variant_spec("resnet"), std::invalid_argument);
}

TEST_CASE("sgd_step") {
    Mat p(1, 1), g(1, 1);
    p.v[0] = 1.0;
    g.v[0] = 2.0;  // d/dx x^2 at x=1
    sgd_step(p, g, 0.1);
    CHECK(p.v[0] == doctest::Approx(0.8).epsilon(1e-15));

    Mat p2 = p;
    sgd_step(p2, g, 0.0);
    CHECK(p2.v[0] == p.v[0]);

    Mat bad(1, 2);
    CHECK_THROWS_AS(sgd_step(p, bad, 0.1), std::invalid_argument);
    g.v[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sgd_step(p, g, 0.1), NumericalError);
}

TEST_CASE("pretraining contracts") {
    auto config = tiny_config();

    SUBCASE("zero iterations leave the initialization untouched") {
        auto c0 = config;
        c0.set("train.pretrain_iters", "0");
        c0.set("train.phaseb_iters", "0");
        const auto ds = world::generate_dataset(c0.world_config());
        const Model a = pretrain_base(ds.base, c0);
        const Model b = pretrain_base(ds.base, c0);
        CHECK(a.post.mu.v == b.post.mu.v);
        for (double x : a.mask_head.W.v) CHECK(x == 0.0);
        for (const auto& r2 : a.box_ref2)
            for (double x : r2.v) CHECK(x == 0.0);
    }

    SUBCASE("smoothed classifier loss is non-increasing end vs start") {
        const auto ds = world::generate_dataset(config.world_config());
        std::vector<double> trace;
        pretrain_base(ds.base, config, &trace);
        REQUIRE(trace.size() >= 100);
        const std::size_t w = 50;
        double head = 0.0, tail = 0.0;
        for (std::size_t i = 0; i < w; ++i) head += trace[i];
        for (std::size_t i = trace.size() - w; i < trace.size(); ++i) tail += trace[i];
        CHECK(tail <= head);
    }

    SUBCASE("phase B leaves classifier and mask weights bit-identical") {
        auto cu = config;
        cu.set("variant", "mask_sig_uncert");
        auto cp = cu;
        cp.set("train.phaseb_iters", "0");
        const auto ds = world::generate_dataset(cu.world_config());
        const Model with_b = pretrain_base(ds.base, cu);
        const Model without_b = pretrain_base(ds.base, cp);
        CHECK(with_b.post.mu.v == without_b.post.mu.v);
        CHECK(with_b.mask_head.W.v == without_b.mask_head.W.v);
        // and the box blocks did change
        bool moved = false;
        for (std::size_t r = 0; r < with_b.box_pred.size(); ++r)
            moved = moved || with_b.box_pred[r].v != without_b.box_pred[r].v;
        CHECK(moved);
    }

    SUBCASE("missing class coverage is rejected") {
        auto ds = world::generate_dataset(config.world_config());
        std::vector<world::Scene> pruned;
        for (const auto& s : ds.base) {
            bool has0 = false;
            for (const auto& o : s.objects) has0 = has0 || o.class_id == 0;
            if (!has0) pruned.push_back(s);
        }
        CHECK_THROWS_AS(pretrain_base(pruned, config), std::invalid_argument);
    }
}

TEST_CASE("finetune and merge") {
    auto config = tiny_config(5);
    const auto ds = world::generate_dataset(config.world_config());
    const Model base = pretrain_base(ds.base, config);

    SUBCASE("input validation") {
        CHECK_THROWS_AS(finetune_new(base, {}, config), std::invalid_argument);
        CHECK_THROWS_AS(finetune_new(base, ds.base, config), std::invalid_argument);
    }

    const Model fresh = finetune_new(base, ds.shots, config);

    SUBCASE("frozen blocks are byte-identical, trained rows are new classes only") {
        CHECK(fresh.box_ref1.v == base.box_ref1.v);
        CHECK(fresh.trunk->fingerprint() == base.trunk->fingerprint());
        REQUIRE(fresh.registry.size() == 3);
        for (const auto& e : fresh.registry) CHECK(!e.is_base);
        for (std::size_t r = 0; r < fresh.registry.size(); ++r) CHECK(fresh.post.row_has_var(r));
    }

    const Model merged = merge_checkpoints(base, fresh);

    SUBCASE("merged layout") {
        REQUIRE(merged.registry.size() == 8);
        for (std::size_t r = 0; r < 5; ++r) {
            CHECK(merged.registry[r].is_base);
            CHECK(!merged.post.row_has_var(r));  // exactly zero variance
        }
        for (std::size_t r = 5; r < 8; ++r) CHECK(merged.post.row_has_var(r));
        // base parameter blocks bit-identical after the merge
        for (std::size_t r = 0; r < 5; ++r) {
            CHECK(std::equal(base.post.mu.row(r), base.post.mu.row(r) + base.post.mu.cols,
                             merged.post.mu.row(r)));
            CHECK(merged.box_pred[r].v == base.box_pred[r].v);
            CHECK(merged.box_ref2[r].v == base.box_ref2[r].v);
        }
    }

    SUBCASE("merge rejects overlap and trunk mismatch") {
        CHECK_THROWS_AS(merge_checkpoints(base, base), std::invalid_argument);
        auto other_cfg = tiny_config(6);
        const auto ds2 = world::generate_dataset(other_cfg.world_config());
        const Model base2 = pretrain_base(ds2.base, other_cfg);
        const Model fresh2 = finetune_new(base2, ds2.shots, other_cfg);
        CHECK_THROWS_AS(merge_checkpoints(base, fresh2), std::invalid_argument);
    }

    SUBCASE("non-forgetting: base-class scoring unchanged by the merge") {
        for (const auto& s : std::vector<world::Scene>(ds.base.begin(), ds.base.begin() + 5)) {
            auto before = detect_scene(base, s);
            auto after = detect_scene(merged, s);
            // merged output restricted to base classes
            std::vector<world::Detection> base_only;
            for (const auto& d : after)
                if (d.class_id < 5) base_only.push_back(d);
            CHECK(same_detections(before, base_only));
        }
    }

    SUBCASE("merge with an empty fine-tune set reproduces the base model") {
        Model empty;
        empty.config = fresh.config;
        empty.trunk = base.trunk;
        empty.post.mu = Mat(0, base.post.mu.cols);
        empty.post.rho = Mat(0, base.post.rho.cols);
        empty.box_ref1 = base.box_ref1;
        empty.mask_head.W = Mat(0, base.mask_head.W.cols);
        const Model same = merge_checkpoints(base, empty);
        for (const auto& s : std::vector<world::Scene>(ds.test.begin(), ds.test.begin() + 4))
            CHECK(same_detections(detect_scene(base, s), detect_scene(same, s)));
    }

    SUBCASE("strong KL pull drives the posterior toward the prior") {
        auto ck = config;
        ck.set("loss.kl_weight", "8");
        ck.set("train.finetune_iters", "500");
        const Model pulled = finetune_new(base, ds.shots, ck);
        const Model loose = finetune_new(base, ds.shots, config);
        double norm_pulled = 0.0, norm_loose = 0.0;
        for (double mu : pulled.post.mu.v) norm_pulled += mu * mu;
        for (double mu : loose.post.mu.v) norm_loose += mu * mu;
        CHECK(norm_pulled < 0.05 * norm_loose);
        for (double mu : pulled.post.mu.v) CHECK(std::fabs(mu) < 0.1);
        for (double rho : pulled.post.rho.v)
            CHECK(std::fabs(probit::softplus(rho) - 1.0) < 0.1);
    }
}

TEST_CASE("checkpoint round trip") {
    auto config = tiny_config(7);
    const auto ds = world::generate_dataset(config.world_config());
    const Model base = pretrain_base(ds.base, config);
    const Model fresh = finetune_new(base, ds.shots, config);
    const Model merged = merge_checkpoints(base, fresh);

    TempFile f1("/tmp/ifsr_test_ckpt1.bin");
    TempFile f2("/tmp/ifsr_test_ckpt2.bin");
    save_checkpoint(merged, f1.path);
    const Model loaded = load_checkpoint(f1.path);

    CHECK(loaded.registry.size() == merged.registry.size());
    CHECK(loaded.post.mu.v == merged.post.mu.v);
    CHECK(loaded.post.has_var == merged.post.has_var);
    CHECK(loaded.box_ref1.v == merged.box_ref1.v);
    CHECK(loaded.trunk->fingerprint() == merged.trunk->fingerprint());

    for (const auto& s : std::vector<world::Scene>(ds.test.begin(), ds.test.begin() + 3))
        CHECK(same_detections(detect_scene(merged, s), detect_scene(loaded, s)));

    // byte-stable serialization, and a fully independent retraining produces
    // the same bytes
    const Model again = merge_checkpoints(pretrain_base(ds.base, config),
                                          finetune_new(base, ds.shots, config));
    TempFile f3("/tmp/ifsr_test_ckpt3.bin");
    save_checkpoint(again, f3.path);
    {
        std::ifstream x(f1.path, std::ios::binary), y(f3.path, std::ios::binary);
        std::string sx((std::istreambuf_iterator<char>(x)), std::istreambuf_iterator<char>());
        std::string sy((std::istreambuf_iterator<char>(y)), std::istreambuf_iterator<char>());
        CHECK(sx == sy);
    }
    save_checkpoint(loaded, f2.path);
    std::ifstream a(f1.path, std::ios::binary), b(f2.path, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    CHECK(!sa.empty());

    CHECK_THROWS_AS(load_checkpoint("/tmp/ifsr_no_such_file.bin"), MissingArtifact);
}

TEST_CASE("dataset round trip") {
    auto config = tiny_config(9);
    const auto ds = world::generate_dataset(config.world_config());
    TempFile f("/tmp/ifsr_test_dataset.json");
    save_dataset(ds, config, f.path);
    const auto loaded = load_dataset(f.path, config);

    REQUIRE(loaded.base.size() == ds.base.size());
    REQUIRE(loaded.shots.size() == ds.shots.size());
    REQUIRE(loaded.test.size() == ds.test.size());
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        CHECK(loaded.test[i].seed == ds.test[i].seed);
        REQUIRE(loaded.test[i].objects.size() == ds.test[i].objects.size());
        for (std::size_t j = 0; j < ds.test[i].objects.size(); ++j) {
            CHECK(loaded.test[i].objects[j].bbox.l == ds.test[i].objects[j].bbox.l);
            CHECK(loaded.test[i].objects[j].occl.fraction == ds.test[i].objects[j].occl.fraction);
        }
    }

    auto other = config;
    other.set("world.occlusion_frac", "0.9");
    CHECK_THROWS_AS(load_dataset(f.path, other), std::invalid_argument);
    CHECK_THROWS_AS(load_dataset("/tmp/ifsr_no_such_dataset.json", config), MissingArtifact);
}

TEST_CASE("run_variant determinism and output contract") {
    auto config = tiny_config(11);
    const auto rows1 = run_variant("mask_sigmoid", config, 2);
    const auto rows2 = run_variant("mask_sigmoid", config, 1);  // worker count must not matter

    REQUIRE(rows1.size() == 6);
    std::size_t seen = 0;
    for (const auto& r : rows1) {
        CHECK(r.variant == "mask_sigmoid");
        CHECK(r.k == 2);
        if ((r.split == "new" || r.split == "base" || r.split == "all") &&
            (r.metric == "box_ap" || r.metric == "mask_ap"))
            ++seen;
    }
    CHECK(seen == 6);
    for (std::size_t i = 0; i < rows1.size(); ++i) {
        CHECK(rows1[i].split == rows2[i].split);
        CHECK(rows1[i].value == rows2[i].value);
    }
}
