#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpl/geometry.hpp"
#include "cpl/scene.hpp"
#include "cpl/tensor.hpp"

namespace cpl {

inline constexpr int kAnchorStride = 2;

// Fixed tiny architecture:
//   conv3x3(C_in->8) relu avgpool2 conv3x3(8->16) relu conv3x3(16->16) relu
//   -> conf head conv1x1(16->1) + sigmoid
//   -> box head  conv1x1(16->4) + relu   (offsets l,t,r,b >= 0, input pixels)
struct DetectorWeights {
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor conv3_w, conv3_b;
    Tensor conf_w, conf_b;
    Tensor box_w, box_b;

    // Gaussian init (mean 0, std 0.1); box head bias starts positive so the
    // relu on the offsets is born in its linear region, and the confidence
    // bias starts low so early training is not dominated by background.
    static DetectorWeights init(int in_channels, uint64_t seed);

    int in_channels() const;
    std::vector<std::pair<std::string, Tensor>> named() const;
    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;

    DetectorWeights clone() const; // deep copy, grads dropped
    uint64_t checksum() const;     // FNV-1a over raw parameter bytes
};

struct ModelOutput {
    Tensor conf_map; // [1, H/2, W/2], sigmoid output in (0,1)
    Tensor box_map;  // [4, H/2, W/2], (l,t,r,b) distances, >= 0
    int grid_h = 0;
    int grid_w = 0;
};

// Anchor (gy,gx) sits at input-pixel centre (2gx+1, 2gy+1).
inline float anchor_cx(int gx) { return static_cast<float>(kAnchorStride * gx + 1); }
inline float anchor_cy(int gy) { return static_cast<float>(kAnchorStride * gy + 1); }

struct AnchorAssignment {
    // flat grid_h*grid_w entries; -1 = negative, otherwise gt object index
    std::vector<int32_t> label;
    // per object, flat anchor indices; every object has at least one
    std::vector<std::vector<int32_t>> per_object;
    int grid_h = 0;
    int grid_w = 0;
};

ModelOutput detector_forward(const DetectorWeights& weights, const Tensor& image);

// Builds the detector input from a scene (replicates shifted channel copies
// when temporal_stack == 3).
Tensor scene_input(const Scene& scene, int temporal_stack);

// Anchors whose centres fall inside the 50%-shrunk gt box are positive; ties
// go to the nearer object centre; an object that captures nothing gets its
// nearest free anchor.
AnchorAssignment assign_anchors(const std::vector<Box>& gt_boxes, int grid_h, int grid_w);

struct Detection {
    Box box;
    float score = 0;
};

// Thresholds candidates, decodes (l,t,r,b) offsets, greedy NMS; the result is
// sorted by descending score.
std::vector<Detection> decode(const ModelOutput& output, float conf_threshold, float nms_iou);

} // namespace cpl
