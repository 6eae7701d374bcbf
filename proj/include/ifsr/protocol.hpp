#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ifsr/classifier.hpp"
#include "ifsr/config.hpp"
#include "ifsr/mask_head.hpp"
#include "ifsr/toy_world.hpp"

namespace ifsr::proto {

enum class ClassifierMode { point, probit, mc, softmax };

/// Which classifier and box loss a named ablation wires together.
struct VariantSpec {
    const char* name;
    ClassifierMode classifier;
    box::BoxMode box_mode;
    bool refine_at_test;
};

const VariantSpec& variant_spec(const std::string& name);
const std::vector<VariantSpec>& all_variants();

struct ClassEntry {
    int id = 0;
    bool is_base = true;
};

/// Full model state: frozen trunk plus per-class head weights. The registry
/// fixes row order everywhere; base rows of the posterior carry no variance.
struct Model {
    cfg::Config config;
    std::shared_ptr<const world::World> trunk;
    std::vector<ClassEntry> registry;

    cls::ClassWeightPosterior post;  // registry order
    Mat softmax_w;                   // (registry + background) x D, softmax variant only

    std::vector<Mat> box_pred;  // per class, 8 x D
    Mat box_ref1;               // H x (D+4), shared
    std::vector<Mat> box_ref2;  // per class, 4 x (H+1)
    mask::MaskHeadParams mask_head;  // registry x D_m

    int row_of(int class_id) const;
    const VariantSpec& spec() const { return variant_spec(config.get("variant")); }
};

/// p <- p - lr * g. Throws NumericalError on non-finite gradients.
void sgd_step(Mat& params, const Mat& grads, double lr);

/// Phase A: point-sigmoid classifier (or softmax baseline) + smooth-L1 box +
/// mask BCE on the base scenes. Phase B (uncert/gauss/refine box modes):
/// everything frozen except the box predictor/refiner, trained with the
/// variant's box loss. Deterministic per config seed. loss_trace, when given,
/// receives the per-iteration phase-A classifier loss.
Model pretrain_base(const std::vector<world::Scene>& base_scenes, const cfg::Config& config,
                    std::vector<double>* loss_trace = nullptr);

/// Fine-tune on the K-shot scenes: only new-class classifier rows, box last
/// layers and mask rows train; the trunk and shared refiner layer are copied
/// frozen. Returns a new-classes-only model. Rejects shots containing base
/// classes and empty shot sets.
Model finetune_new(const Model& base, const std::vector<world::Scene>& shot_scenes,
                   const cfg::Config& config);

/// Registry-ordered concatenation; base classifier rows get exactly zero
/// variance. Rejects overlapping class ids and trunk mismatches.
Model merge_checkpoints(const Model& base, const Model& fresh);

/// Detections for one scene: score filter, per-class box decode (+ optional
/// refinement), mask on the final box, per-class NMS and per-class cap.
std::vector<world::Detection> detect_scene(const Model& m, const world::Scene& s);

/// Per-scene detections; scenes fan out across `workers` threads (read-only
/// model, order-stable output).
std::vector<std::vector<world::Detection>> detect_scenes(
    const Model& m, const std::vector<world::Scene>& scenes, std::size_t workers = 1);

struct MetricRow {
    std::string variant;
    long k = 0;
    long seed = 0;
    std::string split;   // new | base | all
    std::string metric;  // box_ap | mask_ap
    double value = 0.0;
};

/// Box and mask AP for the new/base/all class groups.
std::vector<MetricRow> evaluate_model(const Model& m,
                                      const std::vector<std::vector<world::Detection>>& dets,
                                      const std::vector<world::Scene>& test_scenes);

/// Full lifecycle for one (variant, K, seed) cell: generate data, pretrain,
/// fine-tune, merge, evaluate.
std::vector<MetricRow> run_variant(const std::string& variant, cfg::Config config,
                                   std::size_t eval_workers = 1);

// ---- checkpoint container ----------------------------------------------
// Binary file: magic "IFSRCKP1", u64 header length, JSON header (config
// snapshot, class registry, trunk fingerprint, block directory), then raw
// little-endian f64 payloads. Round-trips bit-exactly.

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

// ---- dataset container ---------------------------------------------------

void save_dataset(const world::Dataset& ds, const cfg::Config& config, const std::string& path);
world::Dataset load_dataset(const std::string& path, const cfg::Config& expected);

}  // namespace ifsr::proto
