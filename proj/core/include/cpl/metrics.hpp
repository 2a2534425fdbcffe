#pragma once

#include <vector>

#include "cpl/detector.hpp"
#include "cpl/geometry.hpp"
#include "cpl/scene.hpp"

namespace cpl {

struct PrPoint {
    float recall = 0;
    float precision = 0;
};

struct EvalResult {
    float ap50 = 0;
    float ap75 = 0;
    float ap = 0;  // mean over IoU 0.50:0.05:0.95
    float fdr = 0; // at IoU 0.5, same operating point as the AP pooling
    std::vector<float> ap_per_threshold; // one per IoU threshold
    std::vector<PrPoint> pr50;           // PR curve at IoU 0.5
};

struct DecodeParams {
    float conf_threshold = 0.10f;
    float nms_iou = 0.45f;
};

inline const std::vector<float>& eval_iou_thresholds() {
    static const std::vector<float> t{0.50f, 0.55f, 0.60f, 0.65f, 0.70f,
                                      0.75f, 0.80f, 0.85f, 0.90f, 0.95f};
    return t;
}

// VOC greedy matching: detections in descending score order take the
// unmatched gt with the highest IoU >= threshold; the rest are false.
std::vector<bool> match_detections(const std::vector<Detection>& dets_sorted,
                                   const std::vector<Box>& gts, float iou_threshold);

// 11-point interpolated AP, computed in double so oracle comparisons are
// exact. With zero gts: 1 if there are no detections, otherwise 0.
double voc07_ap(const std::vector<bool>& tp_flags, int n_gt);

// false detections / all detections; 0 when nothing was detected
float fdr(const std::vector<bool>& tp_flags);

// Full-split evaluation: decode every scene, pool detections globally by
// score, match per scene, report AP at each IoU threshold plus FDR.
EvalResult evaluate(const DetectorWeights& weights, const Dataset& test_set,
                    const DecodeParams& params, int threads = 1);

// Same protocol for externally supplied per-scene detections (used by tests
// to inject oracle detections).
EvalResult evaluate_detections(const std::vector<std::vector<Detection>>& per_scene,
                               const Dataset& test_set);

} // namespace cpl
