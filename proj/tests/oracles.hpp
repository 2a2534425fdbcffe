// Test-only reference implementations, kept deliberately independent of the
// library's computation paths: naive sliding-window convolution, double
// precision geometry, brute-force PR accumulation, and finite differences.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cpl/geometry.hpp"
#include "cpl/tensor.hpp"

namespace oracle {

// direct sliding-window convolution, no tricks
inline std::vector<float> naive_conv2d(const std::vector<float>& in, int ic, int h, int w,
                                       const std::vector<float>& ker, int oc, int k, int pad,
                                       const std::vector<float>* bias = nullptr) {
    int oh = h + 2 * pad - k + 1;
    int ow = w + 2 * pad - k + 1;
    std::vector<float> out(static_cast<size_t>(oc) * oh * ow, 0.0f);
    for (int o = 0; o < oc; ++o)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias ? (*bias)[o] : 0.0;
                for (int c = 0; c < ic; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int iy = oy + ky - pad, ix = ox + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += static_cast<double>(
                                       in[(static_cast<size_t>(c) * h + iy) * w + ix]) *
                                   ker[((static_cast<size_t>(o) * ic + c) * k + ky) * k + kx];
                        }
                out[(static_cast<size_t>(o) * oh + oy) * ow + ox] = static_cast<float>(acc);
            }
    return out;
}

// central finite difference of a scalar function of one tensor entry
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

// relative error with an absolute floor for near-zero gradients
inline double rel_err(double a, double b, double floor_scale = 1e-2) {
    double denom = std::max({std::fabs(a), std::fabs(b), floor_scale});
    return std::fabs(a - b) / denom;
}

// independent CIoU evaluation in double precision, straight from the geometry
inline double ciou_reference(const cpl::Box& p, const cpl::Box& g) {
    double px1 = p.x1, py1 = p.y1, px2 = p.x2, py2 = p.y2;
    double gx1 = g.x1, gy1 = g.y1, gx2 = g.x2, gy2 = g.y2;
    double iw = std::max(0.0, std::min(px2, gx2) - std::max(px1, gx1));
    double ih = std::max(0.0, std::min(py2, gy2) - std::max(py1, gy1));
    double inter = iw * ih;
    double uni = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter;
    double iou = uni < 1e-12 ? inter / 1e-12 : inter / uni;
    double rho2 = std::pow((px1 + px2) / 2 - (gx1 + gx2) / 2, 2) +
                  std::pow((py1 + py2) / 2 - (gy1 + gy2) / 2, 2);
    double c2 = std::pow(std::max(px2, gx2) - std::min(px1, gx1), 2) +
                std::pow(std::max(py2, gy2) - std::min(py1, gy1), 2);
    if (c2 < 1e-12) c2 = 1e-12;
    double pw = px2 - px1, ph = py2 - py1;
    double gw = gx2 - gx1, gh = gy2 - gy1;
    double v = 4.0 / (M_PI * M_PI) *
               std::pow(std::atan(gw / std::max(gh, 1e-12)) -
                            std::atan(pw / std::max(ph, 1e-12)),
                        2);
    double denom = (1.0 - iou) + v;
    double a = denom < 1e-12 ? 0.0 : v / denom;
    return 1.0 - iou + rho2 / c2 + a * v;
}

// ciou on raw double corners (the Box overload above rounds through float)
inline double ciou_reference_d(double px1, double py1, double px2, double py2, double gx1,
                               double gy1, double gx2, double gy2) {
    double iw = std::max(0.0, std::min(px2, gx2) - std::max(px1, gx1));
    double ih = std::max(0.0, std::min(py2, gy2) - std::max(py1, gy1));
    double inter = iw * ih;
    double uni = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter;
    double iou = uni < 1e-12 ? inter / 1e-12 : inter / uni;
    double rho2 = std::pow((px1 + px2) / 2 - (gx1 + gx2) / 2, 2) +
                  std::pow((py1 + py2) / 2 - (gy1 + gy2) / 2, 2);
    double c2 = std::pow(std::max(px2, gx2) - std::min(px1, gx1), 2) +
                std::pow(std::max(py2, gy2) - std::min(py1, gy1), 2);
    if (c2 < 1e-12) c2 = 1e-12;
    double pw = px2 - px1, ph = py2 - py1;
    double gw = gx2 - gx1, gh = gy2 - gy1;
    double v = 4.0 / (M_PI * M_PI) *
               std::pow(std::atan(gw / std::max(gh, 1e-12)) -
                            std::atan(pw / std::max(ph, 1e-12)),
                        2);
    double denom = (1.0 - iou) + v;
    double a = denom < 1e-12 ? 0.0 : v / denom;
    return 1.0 - iou + rho2 / c2 + a * v;
}

// brute-force 11-point interpolated AP from raw flags
inline double ap_reference(const std::vector<bool>& tp, int n_gt) {
    if (n_gt == 0) return tp.empty() ? 1.0 : 0.0;
    if (tp.empty()) return 0.0;
    double best = 0.0, total = 0.0;
    for (int k = 0; k <= 10; ++k) {
        double r = k / 10.0;
        best = 0.0;
        int cum_tp = 0;
        for (size_t i = 0; i < tp.size(); ++i) {
            if (tp[i]) ++cum_tp;
            double recall = static_cast<double>(cum_tp) / n_gt;
            double precision = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
            if (recall >= r && precision > best) best = precision;
        }
        total += best;
    }
    return total / 11.0;
}

} // namespace oracle

// ---------------------------------------------------------------------------
// Double-precision mirror of the detector + weighted loss forward pass.
// Independent of the library's float kernels; finite differences taken on
// this function converge cleanly, so analytic float gradients can be checked
// at tight tolerances.

#include "cpl/detector.hpp"
#include "cpl/loss.hpp"
#include "cpl/scene.hpp"

namespace oracle {

struct DoubleParams {
    // canonical order: conv1 w/b, conv2 w/b, conv3 w/b, conf w/b, box w/b
    std::vector<std::vector<double>> p;
    int in_channels = 1;

    static DoubleParams from(const cpl::DetectorWeights& w) {
        DoubleParams out;
        out.in_channels = w.in_channels();
        for (const cpl::Tensor* t : w.params())
            out.p.emplace_back(t->data(), t->data() + t->numel());
        return out;
    }
};

inline std::vector<double> dconv(const std::vector<double>& in, int ic, int h, int w,
                                 const std::vector<double>& ker, const std::vector<double>& bias,
                                 int oc, int k, int pad) {
    int oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
    std::vector<double> out(static_cast<size_t>(oc) * oh * ow, 0.0);
    for (int o = 0; o < oc; ++o)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias[o];
                for (int c = 0; c < ic; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int iy = oy + ky - pad, ix = ox + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += in[(static_cast<size_t>(c) * h + iy) * w + ix] *
                                   ker[((static_cast<size_t>(o) * ic + c) * k + ky) * k + kx];
                        }
                out[(static_cast<size_t>(o) * oh + oy) * ow + ox] = acc;
            }
    return out;
}

// mirror of the fixed architecture + Eq.16-style weighted loss
inline double double_detector_loss(const DoubleParams& dp, const cpl::Scene& scene,
                                   const std::vector<float>& object_weights, double alpha,
                                   double n_fixed) {
    int h = scene.height, w = scene.width;
    // mirror scene_input: centred intensities, temporal_stack 1 only
    std::vector<double> x(scene.image.size());
    for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(scene.image[i]) - 0.5;
    x = dconv(x, dp.in_channels, h, w, dp.p[0], dp.p[1], 8, 3, 1);
    for (double& v : x) v = v > 0 ? v : 0;
    // avg pool 2x2
    int h2 = h / 2, w2 = w / 2;
    std::vector<double> pooled(static_cast<size_t>(8) * h2 * w2);
    for (int c = 0; c < 8; ++c)
        for (int y = 0; y < h2; ++y)
            for (int xx = 0; xx < w2; ++xx) {
                const double* q = x.data() + (static_cast<size_t>(c) * h + 2 * y) * w + 2 * xx;
                pooled[(static_cast<size_t>(c) * h2 + y) * w2 + xx] =
                    0.25 * (q[0] + q[1] + q[w] + q[w + 1]);
            }
    std::vector<double> f = dconv(pooled, 8, h2, w2, dp.p[2], dp.p[3], 16, 3, 1);
    for (double& v : f) v = v > 0 ? v : 0;
    f = dconv(f, 16, h2, w2, dp.p[4], dp.p[5], 16, 3, 1);
    for (double& v : f) v = v > 0 ? v : 0;
    std::vector<double> conf = dconv(f, 16, h2, w2, dp.p[6], dp.p[7], 1, 1, 0);
    for (double& v : conf) v = 1.0 / (1.0 + std::exp(-v));
    std::vector<double> boxm = dconv(f, 16, h2, w2, dp.p[8], dp.p[9], 4, 1, 0);
    for (double& v : boxm) v = v > 0 ? v : 0;

    cpl::AnchorAssignment asg = cpl::assign_anchors(scene.gt_boxes, h2, w2);
    size_t plane = static_cast<size_t>(h2) * w2;

    double negative = 0.0;
    for (size_t i = 0; i < plane; ++i)
        if (asg.label[i] < 0) negative += conf[i] * conf[i];

    double total = negative;
    int n_pos = 0;
    for (size_t j = 0; j < scene.gt_boxes.size(); ++j) {
        double obj = 0.0;
        for (int32_t flat : asg.per_object[j]) {
            double d = conf[flat] - 1.0;
            obj += d * d;
            double cx = cpl::anchor_cx(flat % w2), cy = cpl::anchor_cy(flat / w2);
            const cpl::Box& g = scene.gt_boxes[j];
            obj += alpha * ciou_reference_d(cx - boxm[flat], cy - boxm[plane + flat],
                                            cx + boxm[2 * plane + flat],
                                            cy + boxm[3 * plane + flat], g.x1, g.y1, g.x2, g.y2);
            ++n_pos;
        }
        total += object_weights[j] * obj;
    }
    double n = scene.gt_boxes.empty() ? n_fixed : static_cast<double>(n_pos);
    return total / n;
}

} // namespace oracle
