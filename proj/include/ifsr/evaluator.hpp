#pragma once

#include <vector>

#include "ifsr/toy_world.hpp"

namespace ifsr::world {

enum class ApMode { box, mask };

/// Canvas-space bit raster (mask_raster x mask_raster pixels).
using Raster = std::vector<std::uint64_t>;

Raster raster_gt(const World& w, const Scene& s, std::size_t obj);
Raster raster_det(const WorldConfig& cfg, const Detection& d);
double raster_iou(const Raster& a, const Raster& b);

/// IoU thresholds 0.5:0.05:0.95.
std::vector<double> default_iou_grid();

/// All-point-interpolated average precision, averaged over the IoU grid and
/// over the classes in `class_ids` that appear in the ground truth. Detections
/// are ranked by (score desc, scene asc, insertion asc); each detection
/// greedily claims the highest-IoU unmatched ground truth at or above the
/// threshold, ties to the lowest index.
double average_precision(const std::vector<std::vector<Detection>>& dets_per_scene,
                         const std::vector<Scene>& scenes, const World& w, ApMode mode,
                         const std::vector<int>& class_ids,
                         const std::vector<double>& iou_thresholds);

/// Brute-force reference evaluator: same metric definition, independently
/// coded (own box IoU, own selection sort, own exhaustive matching and
/// precision-envelope scan). Test oracle for average_precision.
double reference_average_precision(const std::vector<std::vector<Detection>>& dets_per_scene,
                                   const std::vector<Scene>& scenes, const World& w, ApMode mode,
                                   const std::vector<int>& class_ids,
                                   const std::vector<double>& iou_thresholds);

}  // namespace ifsr::world
