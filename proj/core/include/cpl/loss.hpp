#pragma once

#include <span>
#include <vector>

#include "cpl/detector.hpp"
#include "cpl/geometry.hpp"
#include "cpl/tensor.hpp"

namespace cpl {

// Per-image loss split into the background term and one term per object, so
// object weights can scale each object's share independently.
struct LossBreakdown {
    Tensor negative_loss;            // scalar: sum of squared conf over negatives
    std::vector<Tensor> per_object;  // scalar per object: conf part + alpha * ciou part
    float normalizer = 1.0f;         // positive anchor count, or n_fixed when no objects
    Tensor total;                    // (negative + sum(per_object)) / normalizer
};

// Differentiable CIoU loss for a predicted box given as corner scalars on the
// tape; 1 - IoU + centre_dist^2/diag^2 + a*v.
Tensor ciou_loss(const Tensor& px1, const Tensor& py1, const Tensor& px2, const Tensor& py2,
                 const Box& gt);

// Plain-value convenience form (runs the same graph on a scratch tape).
float ciou_loss(const Box& pred, const Box& gt);

// Per-anchor loss: squared confidence error, plus alpha * CIoU for positives.
float anchor_loss(float pred_conf, float target_conf, const Box& pred_box, const Box& gt_box,
                  bool is_positive, float alpha);

// Object-grouped total (the production route used for weighting).
LossBreakdown total_loss(const ModelOutput& output, const AnchorAssignment& assignment,
                         const std::vector<Box>& gt_boxes, float alpha, float n_fixed);

// Flat anchor-sum total computed independently with plain arithmetic; the two
// routes must agree to float precision.
float anchor_sum_total_loss(const ModelOutput& output, const AnchorAssignment& assignment,
                            const std::vector<Box>& gt_boxes, float alpha, float n_fixed);

// (negative + sum_i v_i * per_object_i) / N; the background term is never
// weighted and the weights are constants to the tape.
Tensor weighted_total_loss(const LossBreakdown& breakdown, std::span<const float> weights);

// Decoded box corners for the anchor at `flat` as tape scalars.
void predicted_box_at(const ModelOutput& output, int flat, Tensor& x1, Tensor& y1, Tensor& x2,
                      Tensor& y2);

} // namespace cpl
