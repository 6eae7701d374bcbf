#pragma once

#include <cstdint>
#include <vector>

#include "ifsr/box_head.hpp"
#include "ifsr/common.hpp"

namespace ifsr::world {

/// One side of an object hidden from view. The annotated extent stays the
/// full box; features and proposals only see the visible part.
struct Occlusion {
    bool occluded = false;
    int side = 0;        // 0 l, 1 t, 2 r, 3 b
    double fraction = 0.0;
};

struct SceneObject {
    int class_id = 0;
    box::SideBox bbox;  // full annotated extent, elliptical occupancy inside
    Occlusion occl;
    std::uint64_t appearance_seed = 0;  // instance appearance around the class prototype

    box::SideBox visible_box() const;
};

struct Scene {
    std::uint64_t seed = 0;
    std::vector<SceneObject> objects;
};

struct WorldConfig {
    std::uint64_t seed = 1;
    std::size_t n_base = 5;
    std::size_t n_new = 3;
    std::size_t shots = 1;  // K
    std::size_t base_scenes = 240;
    std::size_t test_scenes = 200;
    std::size_t min_objects = 1;
    std::size_t max_objects = 3;
    double occlusion_frac = 0.3;
    double occl_min = 0.1;
    double occl_max = 0.6;
    double size_min = 0.12;      // sqrt(w*h) range of objects
    double size_max = 0.30;
    double aspect_spread = 0.0;  // canonical log-aspect range (0: one global shape prior)
    double aspect_sd = 0.08;     // per-object jitter around the canonical aspect
    double instance_sd = 2.0;    // appearance scatter around the class prototype
    bool proto_overlap_scaling = true;  // scale prototype channels by overlap v

    std::size_t feat_dim = 24;  // D, includes trailing bias 1
    std::size_t proto_dim = 8;
    double proto_gain = 2.0;
    std::size_t noise_dim = 4;
    double noise_scale = 0.15;
    double extractor_mix = 0.35;     // off-diagonal strength of the frozen map
    double extractor_squash = 0.5;   // tanh(s x)/s keeps channels near axis-aligned
    double feat_scale = 1.0;         // extractor output scale
    double geom_sat = 0.07;          // saturation scale of the geometry channels

    std::size_t proposals_per_scene = 32;
    std::size_t negative_proposals = 8;
    double jitter_sigma = 0.05;

    std::size_t mask_grid = 14;     // G
    std::size_t mask_feat_dim = 8;  // D_m, includes trailing bias 1
    std::size_t mask_raster = 56;   // canvas raster used for mask IoU

    std::size_t classes() const { return n_base + n_new; }
    // prototype, visible-box geometry (4), occluded-side flags (4), overlap,
    // query log-size (2), noise
    std::size_t raw_dim() const { return proto_dim + 11 + noise_dim; }
};

/// Canonical log-aspect of a class, fixed per world seed. Objects scatter
/// around it, so a truncated visible box shows up as an aspect anomaly.
double class_aspect(const WorldConfig& cfg, int class_id);

struct Dataset {
    std::vector<Scene> base;   // base classes only, abundant
    std::vector<Scene> shots;  // exactly K annotated instances per new class
    std::vector<Scene> test;   // both class groups
};

/// Deterministic per seed. Throws when the requested object count cannot be
/// placed (pairwise overlap bound exhausts the placement attempts).
Dataset generate_dataset(const WorldConfig& cfg);

/// Frozen synthetic trunk: class prototypes plus a fixed random two-layer
/// feature map. Stands in for the backbone + ROI pooling; never trained.
class World {
  public:
    explicit World(const WorldConfig& cfg);
    World(const WorldConfig& cfg, Mat protos, Mat w1, Mat b1, Mat w2, Mat b2);

    const WorldConfig& config() const { return cfg_; }

    /// Pre-mixing input of the extractor: prototype of the dominant object
    /// scaled by overlap, visible-box geometry, occlusion cues, overlap and
    /// seeded noise. Zero prototype/geometry for background boxes.
    std::vector<double> raw_input(const Scene& s, const box::SideBox& b) const;

    /// Same (scene, box) always yields the same feature; trailing entry is 1.
    Feature extract(const Scene& s, const box::SideBox& b) const;

    /// Per-cell mask features on a grid over `roi`, (grid*grid) x mask_feat_dim.
    Mat mask_cells(const Scene& s, const box::SideBox& roi, std::size_t grid) const;

    /// Ground-truth occupancy of object `obj` rasterized on a grid over roi:
    /// inside the ellipse and not occluded.
    Mat gt_mask_grid(const Scene& s, std::size_t obj, const box::SideBox& roi,
                     std::size_t grid) const;

    const Mat& prototypes() const { return protos_; }
    const Mat& w1() const { return w1_; }
    const Mat& b1() const { return b1_; }
    const Mat& w2() const { return w2_; }
    const Mat& b2() const { return b2_; }

    /// Content hash of the frozen trunk blocks; merge requires equality.
    std::uint64_t fingerprint() const;

    /// Index and visible-box IoU of the object dominating a query box, or
    /// {-1, 0} for background.
    std::pair<int, double> dominant(const Scene& s, const box::SideBox& b) const;

  private:
    WorldConfig cfg_;
    Mat protos_;  // classes x proto_dim
    Mat w1_, b1_, w2_, b2_;
};

double iou(const box::SideBox& a, const box::SideBox& b);

struct Proposal {
    box::SideBox bbox;
    int matched_gt = -1;  // index into scene.objects, -1 background
    double match_iou = 0.0;
};

/// Jittered visible boxes of the scene's objects plus uniform negatives;
/// deterministic per scene seed.
std::vector<Proposal> make_proposals(const WorldConfig& cfg, const Scene& s);

/// Label each proposal with its max-IoU ground truth (against full annotated
/// boxes) when the IoU clears the threshold; ties go to the lowest gt index.
void match_proposals(std::vector<Proposal>& proposals, const Scene& s, double iou_threshold);

struct Detection {
    int class_id = 0;
    double score = 0.0;
    box::SideBox bbox;
    Mat mask;  // binarized G x G grid aligned to bbox; may be empty
};

/// Greedy per-class suppression by descending score. Survivors of one class
/// never exceed the IoU threshold pairwise. Output sorted by (score desc,
/// class asc, input order asc).
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

}  // namespace ifsr::world
