#include "ifsr/evaluator.hpp"

#include <algorithm>
#include <cmath>

namespace ifsr::world {
namespace {

void set_bit(Raster& r, std::size_t i) { r[i >> 6] |= (1ull << (i & 63)); }

}  // namespace

Raster raster_gt(const World& w, const Scene& s, std::size_t obj) {
    const std::size_t res = w.config().mask_raster;
    Raster r((res * res + 63) / 64, 0);
    const SceneObject& o = s.objects[obj];
    for (std::size_t yy = 0; yy < res; ++yy) {
        const double y = (yy + 0.5) / res;
        for (std::size_t xx = 0; xx < res; ++xx) {
            const double x = (xx + 0.5) / res;
            // reuse the grid rasterizer's semantics: inside ellipse and visible
            const double cx = 0.5 * (o.bbox.l + o.bbox.r);
            const double cy = 0.5 * (o.bbox.t + o.bbox.b);
            const double rx = (x - cx) / (0.5 * o.bbox.width());
            const double ry = (y - cy) / (0.5 * o.bbox.height());
            if (rx * rx + ry * ry > 1.0) continue;
            if (o.occl.occluded) {
                const auto vis = o.visible_box();
                if (x < vis.l || x > vis.r || y < vis.t || y > vis.b) continue;
            }
            set_bit(r, yy * res + xx);
        }
    }
    return r;
}

Raster raster_det(const WorldConfig& cfg, const Detection& d) {
    const std::size_t res = cfg.mask_raster;
    Raster r((res * res + 63) / 64, 0);
    if (d.mask.size() == 0 || !d.bbox.valid()) return r;
    const std::size_t g = d.mask.rows;
    for (std::size_t yy = 0; yy < res; ++yy) {
        const double y = (yy + 0.5) / res;
        if (y < d.bbox.t || y > d.bbox.b) continue;
        const auto cy = std::min<std::size_t>(
            g - 1, static_cast<std::size_t>((y - d.bbox.t) / d.bbox.height() * g));
        for (std::size_t xx = 0; xx < res; ++xx) {
            const double x = (xx + 0.5) / res;
            if (x < d.bbox.l || x > d.bbox.r) continue;
            const auto cx = std::min<std::size_t>(
                g - 1, static_cast<std::size_t>((x - d.bbox.l) / d.bbox.width() * g));
            if (d.mask.at(cy, cx) != 0.0) set_bit(r, yy * res + xx);
        }
    }
    return r;
}

double raster_iou(const Raster& a, const Raster& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += static_cast<std::size_t>(__builtin_popcountll(a[i] & b[i]));
        uni += static_cast<std::size_t>(__builtin_popcountll(a[i] | b[i]));
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> default_iou_grid() {
    std::vector<double> grid;
    for (int i = 0; i < 10; ++i) grid.push_back(0.5 + 0.05 * i);
    return grid;
}

double average_precision(const std::vector<std::vector<Detection>>& dets_per_scene,
                         const std::vector<Scene>& scenes, const World& w, ApMode mode,
                         const std::vector<int>& class_ids,
                         const std::vector<double>& iou_thresholds) {
    require(dets_per_scene.size() == scenes.size(), "average_precision: scene count mismatch");

    // per-scene gt rasters, built lazily in mask mode
    std::vector<std::vector<Raster>> gt_rasters(scenes.size());
    std::vector<std::vector<Raster>> det_rasters(scenes.size());
    if (mode == ApMode::mask) {
        for (std::size_t si = 0; si < scenes.size(); ++si) {
            gt_rasters[si].reserve(scenes[si].objects.size());
            for (std::size_t oi = 0; oi < scenes[si].objects.size(); ++oi)
                gt_rasters[si].push_back(raster_gt(w, scenes[si], oi));
            det_rasters[si].reserve(dets_per_scene[si].size());
            for (const auto& d : dets_per_scene[si])
                det_rasters[si].push_back(raster_det(w.config(), d));
        }
    }

    double ap_sum = 0.0;
    std::size_t classes_with_gt = 0;

    for (int cls : class_ids) {
        std::size_t n_gt = 0;
        for (const auto& s : scenes)
            for (const auto& o : s.objects)
                if (o.class_id == cls) ++n_gt;
        if (n_gt == 0) continue;
        ++classes_with_gt;

        struct Entry {
            double score;
            std::size_t scene, det;
        };
        std::vector<Entry> entries;
        for (std::size_t si = 0; si < scenes.size(); ++si)
            for (std::size_t di = 0; di < dets_per_scene[si].size(); ++di)
                if (dets_per_scene[si][di].class_id == cls)
                    entries.push_back({dets_per_scene[si][di].score, si, di});
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.scene != b.scene) return a.scene < b.scene;
            return a.det < b.det;
        });

        // IoU of each ranked detection against every same-class gt of its scene
        std::vector<std::vector<std::pair<std::size_t, double>>> overlaps(entries.size());
        for (std::size_t e = 0; e < entries.size(); ++e) {
            const auto& scene = scenes[entries[e].scene];
            const auto& det = dets_per_scene[entries[e].scene][entries[e].det];
            for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
                if (scene.objects[oi].class_id != cls) continue;
                const double v = mode == ApMode::box
                                     ? iou(det.bbox, scene.objects[oi].bbox)
                                     : raster_iou(det_rasters[entries[e].scene][entries[e].det],
                                                  gt_rasters[entries[e].scene][oi]);
                overlaps[e].push_back({oi, v});
            }
        }

        double class_ap = 0.0;
        for (double thr : iou_thresholds) {
            std::vector<std::vector<char>> taken(scenes.size());
            for (std::size_t si = 0; si < scenes.size(); ++si)
                taken[si].assign(scenes[si].objects.size(), 0);

            std::vector<char> is_tp(entries.size(), 0);
            for (std::size_t e = 0; e < entries.size(); ++e) {
                double best = thr;
                int best_gt = -1;
                for (const auto& [oi, v] : overlaps[e]) {
                    if (taken[entries[e].scene][oi]) continue;
                    if (v >= best && (best_gt < 0 || v > best)) {
                        best = v;
                        best_gt = static_cast<int>(oi);
                    }
                }
                if (best_gt >= 0) {
                    taken[entries[e].scene][best_gt] = 1;
                    is_tp[e] = 1;
                }
            }

            // all-point interpolation: area under the precision envelope
            std::vector<double> precision(entries.size()), recall(entries.size());
            std::size_t tp = 0;
            for (std::size_t e = 0; e < entries.size(); ++e) {
                tp += is_tp[e];
                precision[e] = static_cast<double>(tp) / static_cast<double>(e + 1);
                recall[e] = static_cast<double>(tp) / static_cast<double>(n_gt);
            }
            for (std::size_t e = entries.size(); e-- > 1;)
                precision[e - 1] = std::max(precision[e - 1], precision[e]);

            double ap = 0.0;
            double prev_recall = 0.0;
            for (std::size_t e = 0; e < entries.size(); ++e) {
                ap += (recall[e] - prev_recall) * precision[e];
                prev_recall = recall[e];
            }
            class_ap += ap;
        }
        ap_sum += class_ap / static_cast<double>(iou_thresholds.size());
    }

    return classes_with_gt == 0 ? 0.0 : ap_sum / static_cast<double>(classes_with_gt);
}

}  // namespace ifsr::world
