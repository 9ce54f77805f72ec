#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "miaod/detector.hpp"
#include "miaod/losses.hpp"
#include "miaod/synthdata.hpp"

namespace miaod::eval {

struct DetectionRecord {
    std::string image_id;
    int class_index = 0;
    Box box;
    double score = 0.0;
};

/// Per-image ground-truth boxes for one class.
using ClassGroundTruth = std::map<std::string, std::vector<Box>>;

/// Greedy-matched average precision for a single class. Detections may come
/// in any order; sorting (descending score, ties by image id then insertion
/// order) happens inside. All-point interpolation by default, VOC-2007
/// 11-point when eleven_point is set.
double average_precision(std::vector<DetectionRecord> detections,
                         const ClassGroundTruth& gts, double iou_threshold = 0.5,
                         bool eleven_point = false);

struct MapResult {
    std::vector<double> per_class_ap;  // classes absent from the gt get -1
    double map = 0.0;                  // mean over classes present in the gt
};

MapResult evaluate_map(const det::DetectorModel& model,
                       const std::vector<synth::ImageSample>& test_set,
                       const det::AnchorGrid& grid, double score_threshold,
                       double nms_iou = 0.5, double iou_threshold = 0.5,
                       bool eleven_point = false);

/// Across the selected images, count instances among each image's k most
/// uncertain (unweighted discrepancy) whose anchor box overlaps any gt box
/// with IoU >= 0.5.
int tp_selected(const det::DetectorModel& model,
                const std::vector<const synth::ImageSample*>& selected,
                const det::AnchorGrid& grid, int k);

/// Writes two PGM maps: per-pixel accumulated instance uncertainty at `path`,
/// and the per-pixel accumulated image-classification score with "_cls"
/// appended to the stem. Both min-max normalized to 8 bits.
void dump_heatmap(const det::DetectorModel& model,
                  const synth::ImageSample& image, const det::AnchorGrid& grid,
                  const std::filesystem::path& path, bool weighted);

}  // namespace miaod::eval
