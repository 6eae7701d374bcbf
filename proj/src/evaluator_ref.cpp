// Brute-force reference for average_precision. Deliberately unoptimized and
// independently coded: own box IoU, repeated max-score selection instead of a
// sort, exhaustive matching scans, O(n^2) precision-envelope evaluation.
#include <cmath>

#include "ifsr/evaluator.hpp"

namespace ifsr::world {
namespace {

double ref_box_iou(const box::SideBox& a, const box::SideBox& b) {
    const double iw = std::min(a.r, b.r) - std::max(a.l, b.l);
    const double ih = std::min(a.b, b.b) - std::max(a.t, b.t);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double area_a = (a.r - a.l) * (a.b - a.t);
    const double area_b = (b.r - b.l) * (b.b - b.t);
    const double uni = area_a + area_b - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct RefDet {
    double score;
    std::size_t scene;
    std::size_t det;
};

}  // namespace

double reference_average_precision(const std::vector<std::vector<Detection>>& dets_per_scene,
                                   const std::vector<Scene>& scenes, const World& w, ApMode mode,
                                   const std::vector<int>& class_ids,
                                   const std::vector<double>& iou_thresholds) {
    require(dets_per_scene.size() == scenes.size(), "reference_ap: scene count mismatch");

    std::vector<std::vector<Raster>> gt_rasters(scenes.size());
    std::vector<std::vector<Raster>> det_rasters(scenes.size());
    if (mode == ApMode::mask) {
        for (std::size_t si = 0; si < scenes.size(); ++si) {
            for (std::size_t oi = 0; oi < scenes[si].objects.size(); ++oi)
                gt_rasters[si].push_back(raster_gt(w, scenes[si], oi));
            for (const auto& d : dets_per_scene[si])
                det_rasters[si].push_back(raster_det(w.config(), d));
        }
    }

    double total = 0.0;
    std::size_t with_gt = 0;

    for (int cls : class_ids) {
        std::size_t n_gt = 0;
        for (const auto& s : scenes)
            for (const auto& o : s.objects)
                if (o.class_id == cls) ++n_gt;
        if (n_gt == 0) continue;
        ++with_gt;

        std::vector<RefDet> pool;
        for (std::size_t si = 0; si < scenes.size(); ++si)
            for (std::size_t di = 0; di < dets_per_scene[si].size(); ++di)
                if (dets_per_scene[si][di].class_id == cls)
                    pool.push_back({dets_per_scene[si][di].score, si, di});

        // rank by repeated selection of the best remaining detection
        std::vector<RefDet> ranked;
        std::vector<char> used(pool.size(), 0);
        for (std::size_t round = 0; round < pool.size(); ++round) {
            std::size_t best = pool.size();
            for (std::size_t i = 0; i < pool.size(); ++i) {
                if (used[i]) continue;
                if (best == pool.size()) {
                    best = i;
                    continue;
                }
                const RefDet& a = pool[i];
                const RefDet& b = pool[best];
                const bool better = a.score > b.score ||
                                    (a.score == b.score && (a.scene < b.scene ||
                                                            (a.scene == b.scene && a.det < b.det)));
                if (better) best = i;
            }
            used[best] = 1;
            ranked.push_back(pool[best]);
        }

        double class_ap = 0.0;
        for (double thr : iou_thresholds) {
            std::vector<std::vector<char>> claimed(scenes.size());
            for (std::size_t si = 0; si < scenes.size(); ++si)
                claimed[si].assign(scenes[si].objects.size(), 0);

            std::vector<int> tp(ranked.size(), 0);
            for (std::size_t r = 0; r < ranked.size(); ++r) {
                const auto& scene = scenes[ranked[r].scene];
                const auto& det = dets_per_scene[ranked[r].scene][ranked[r].det];
                int pick = -1;
                double pick_iou = -1.0;
                for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
                    if (scene.objects[oi].class_id != cls) continue;
                    if (claimed[ranked[r].scene][oi]) continue;
                    double v;
                    if (mode == ApMode::box)
                        v = ref_box_iou(det.bbox, scene.objects[oi].bbox);
                    else
                        v = raster_iou(det_rasters[ranked[r].scene][ranked[r].det],
                                       gt_rasters[ranked[r].scene][oi]);
                    if (v >= thr && v > pick_iou) {
                        pick_iou = v;
                        pick = static_cast<int>(oi);
                    }
                }
                if (pick >= 0) {
                    claimed[ranked[r].scene][pick] = 1;
                    tp[r] = 1;
                }
            }

            double ap = 0.0;
            double prev_recall = 0.0;
            for (std::size_t r = 0; r < ranked.size(); ++r) {
                int tp_here = 0;
                for (std::size_t j = 0; j <= r; ++j) tp_here += tp[j];
                const double recall = static_cast<double>(tp_here) / static_cast<double>(n_gt);

                // precision envelope: best precision at any rank >= r
                double env = 0.0;
                for (std::size_t j = r; j < ranked.size(); ++j) {
                    int tpj = 0;
                    for (std::size_t k = 0; k <= j; ++k) tpj += tp[k];
                    env = std::max(env, static_cast<double>(tpj) / static_cast<double>(j + 1));
                }
                ap += (recall - prev_recall) * env;
                prev_recall = recall;
            }
            class_ap += ap;
        }
        total += class_ap / static_cast<double>(iou_thresholds.size());
    }

    return with_gt == 0 ? 0.0 : total / static_cast<double>(with_gt);
}

}  // namespace ifsr::world
