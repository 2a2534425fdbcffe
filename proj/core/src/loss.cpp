#include "cpl/loss.hpp"

#include <cmath>

namespace cpl {

namespace {

const float kPi = static_cast<float>(M_PI);

Tensor scalar(float v) { return Tensor::scalar(v); }

} // namespace

Tensor ciou_loss(const Tensor& px1, const Tensor& py1, const Tensor& px2, const Tensor& py2,
                 const Box& gt) {
    Tensor gx1 = scalar(gt.x1), gy1 = scalar(gt.y1), gx2 = scalar(gt.x2), gy2 = scalar(gt.y2);

    Tensor pw = sub(px2, px1);
    Tensor ph = sub(py2, py1);
    float gw = gt.width(), gh = gt.height();

    // overlap
    Tensor ix1 = maximum(px1, gx1);
    Tensor iy1 = maximum(py1, gy1);
    Tensor ix2 = minimum(px2, gx2);
    Tensor iy2 = minimum(py2, gy2);
    Tensor inter = mul(relu(sub(ix2, ix1)), relu(sub(iy2, iy1)));
    Tensor uni = sub(add(mul(pw, ph), scalar(gw * gh)), inter);
    Tensor iou = div(inter, uni);

    // centre distance over enclosing-box diagonal
    Tensor pcx = mul(add(px1, px2), scalar(0.5f));
    Tensor pcy = mul(add(py1, py2), scalar(0.5f));
    Tensor rho2 = add(square(sub(pcx, scalar(gt.cx()))), square(sub(pcy, scalar(gt.cy()))));
    Tensor ex1 = minimum(px1, gx1);
    Tensor ey1 = minimum(py1, gy1);
    Tensor ex2 = maximum(px2, gx2);
    Tensor ey2 = maximum(py2, gy2);
    Tensor c2 = add(square(sub(ex2, ex1)), square(sub(ey2, ey1)));

    // aspect-ratio consistency
    float gt_atan = std::atan(gw / std::max(gh, kProtectEps));
    Tensor v = mul(scalar(4.0f / (kPi * kPi)),
                   square(sub(scalar(gt_atan), atan(div(pw, ph)))));
    Tensor a = div(v, add(sub(scalar(1.0f), iou), v));

    return add(add(sub(scalar(1.0f), iou), div(rho2, c2)), mul(a, v));
}

float ciou_loss(const Box& pred, const Box& gt) {
    Tensor x1 = scalar(pred.x1), y1 = scalar(pred.y1), x2 = scalar(pred.x2), y2 = scalar(pred.y2);
    return ciou_loss(x1, y1, x2, y2, gt).item();
}

float anchor_loss(float pred_conf, float target_conf, const Box& pred_box, const Box& gt_box,
                  bool is_positive, float alpha) {
    float d = pred_conf - target_conf;
    float loss = d * d;
    if (is_positive) loss += alpha * ciou_loss(pred_box, gt_box);
    return loss;
}

void predicted_box_at(const ModelOutput& output, int flat, Tensor& x1, Tensor& y1, Tensor& x2,
                      Tensor& y2) {
    size_t plane = static_cast<size_t>(output.grid_h) * output.grid_w;
    int gy = flat / output.grid_w;
    int gx = flat % output.grid_w;
    float cx = anchor_cx(gx), cy = anchor_cy(gy);
    Tensor l = select(output.box_map, flat);
    Tensor t = select(output.box_map, static_cast<int64_t>(plane) + flat);
    Tensor r = select(output.box_map, static_cast<int64_t>(2 * plane) + flat);
    Tensor b = select(output.box_map, static_cast<int64_t>(3 * plane) + flat);
    x1 = sub(scalar(cx), l);
    y1 = sub(scalar(cy), t);
    x2 = add(scalar(cx), r);
    y2 = add(scalar(cy), b);
}

LossBreakdown total_loss(const ModelOutput& output, const AnchorAssignment& assignment,
                         const std::vector<Box>& gt_boxes, float alpha, float n_fixed) {
    CPL_REQUIRE(assignment.grid_h == output.grid_h && assignment.grid_w == output.grid_w,
            "total_loss: assignment grid does not match output grid");
    require(assignment.per_object.size() == gt_boxes.size(),
            "total_loss: assignment object count does not match gt boxes");
    require(n_fixed > 0.0f, "total_loss: n_fixed must be positive");

    size_t n_anchor = static_cast<size_t>(output.grid_h) * output.grid_w;

    // (conf - target)^2 over the whole map, then split by masks
    std::vector<float> target(n_anchor, 0.0f);
    std::vector<float> neg_mask(n_anchor, 1.0f);
    for (size_t i = 0; i < n_anchor; ++i) {
        if (assignment.label[i] >= 0) {
            target[i] = 1.0f;
            neg_mask[i] = 0.0f;
        }
    }
    Tensor target_t = Tensor::from_data({1, output.grid_h, output.grid_w}, std::move(target));
    Tensor conf_err = square(sub(output.conf_map, target_t));

    LossBreakdown out;
    out.negative_loss =
        sum(mul(conf_err, Tensor::from_data({1, output.grid_h, output.grid_w}, std::move(neg_mask))));

    size_t plane = n_anchor;
    int total_pos = 0;
    for (size_t j = 0; j < gt_boxes.size(); ++j) {
        const auto& anchors = assignment.per_object[j];
        require(!anchors.empty(), "total_loss: object without positive anchors");
        total_pos += static_cast<int>(anchors.size());
        int p = static_cast<int>(anchors.size());

        // all of the object's anchors as [P] vectors; one ciou graph per object
        std::vector<int32_t> il(anchors.begin(), anchors.end()), it, ir, ib;
        std::vector<float> cx(p), cy(p);
        for (int k = 0; k < p; ++k) {
            it.push_back(anchors[k] + static_cast<int32_t>(plane));
            ir.push_back(anchors[k] + static_cast<int32_t>(2 * plane));
            ib.push_back(anchors[k] + static_cast<int32_t>(3 * plane));
            cx[k] = anchor_cx(anchors[k] % output.grid_w);
            cy[k] = anchor_cy(anchors[k] / output.grid_w);
        }
        Tensor cxs = Tensor::from_data({p}, std::move(cx));
        Tensor cys = Tensor::from_data({p}, std::move(cy));
        Tensor x1 = sub(cxs, gather(output.box_map, std::move(il)));
        Tensor y1 = sub(cys, gather(output.box_map, std::move(it)));
        Tensor x2 = add(cxs, gather(output.box_map, std::move(ir)));
        Tensor y2 = add(cys, gather(output.box_map, std::move(ib)));

        Tensor conf_part = sum(gather(conf_err, std::vector<int32_t>(anchors.begin(), anchors.end())));
        Tensor box_part = sum(ciou_loss(x1, y1, x2, y2, gt_boxes[j]));
        out.per_object.push_back(add(conf_part, mul(scalar(alpha), box_part)));
    }

    out.normalizer = gt_boxes.empty() ? n_fixed : static_cast<float>(total_pos);

    Tensor num = out.negative_loss;
    for (const Tensor& obj : out.per_object) num = add(num, obj);
    out.total = div(num, scalar(out.normalizer));
    return out;
}

float anchor_sum_total_loss(const ModelOutput& output, const AnchorAssignment& assignment,
                            const std::vector<Box>& gt_boxes, float alpha, float n_fixed) {
    size_t n_anchor = static_cast<size_t>(output.grid_h) * output.grid_w;
    const float* conf = output.conf_map.data();
    const float* boxm = output.box_map.data();
    size_t plane = n_anchor;

    float acc = 0.0f;
    int total_pos = 0;
    for (size_t i = 0; i < n_anchor; ++i) {
        int32_t lab = assignment.label[i];
        bool pos = lab >= 0;
        if (pos) ++total_pos;
        Box pred{};
        if (pos) {
            int gy = static_cast<int>(i) / output.grid_w;
            int gx = static_cast<int>(i) % output.grid_w;
            pred = Box{anchor_cx(gx) - boxm[i], anchor_cy(gy) - boxm[plane + i],
                       anchor_cx(gx) + boxm[2 * plane + i], anchor_cy(gy) + boxm[3 * plane + i]};
        }
        acc += anchor_loss(conf[i], pos ? 1.0f : 0.0f, pred, pos ? gt_boxes[lab] : Box{}, pos,
                           alpha);
    }
    float n = gt_boxes.empty() ? n_fixed : static_cast<float>(total_pos);
    return acc / n;
}

Tensor weighted_total_loss(const LossBreakdown& breakdown, std::span<const float> weights) {
    require(weights.size() == breakdown.per_object.size(), "weighted_total_loss: " + std::to_string(weights.size()) + " weights for " +
                std::to_string(breakdown.per_object.size()) + " objects");
    Tensor num = breakdown.negative_loss;
    for (size_t i = 0; i < weights.size(); ++i) {
        require(weights[i] >= 0.0f && weights[i] <= 1.0f,
                "weighted_total_loss: weight outside [0,1]");
        num = add(num, mul(breakdown.per_object[i], scalar(weights[i])));
    }
    return div(num, scalar(breakdown.normalizer));
}

} // namespace cpl
