#include "cpl/detector.hpp"

#include <algorithm>
#include <cmath>

#include "cpl/rng.hpp"

namespace cpl {

namespace {

Tensor gaussian_tensor(const Shape& shape, Rng& rng, float stddev) {
    Tensor t = Tensor::zeros(shape, true);
    float* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal_f(0.0f, stddev);
    return t;
}

} // namespace

DetectorWeights DetectorWeights::init(int in_channels, uint64_t seed) {
    CPL_REQUIRE(in_channels > 0, "detector: in_channels must be positive");
    Rng rng(seed);
    DetectorWeights w;
    w.conv1_w = gaussian_tensor({8, in_channels, 3, 3}, rng, 0.1f);
    w.conv1_b = Tensor::zeros({8}, true);
    w.conv2_w = gaussian_tensor({16, 8, 3, 3}, rng, 0.1f);
    w.conv2_b = Tensor::zeros({16}, true);
    w.conv3_w = gaussian_tensor({16, 16, 3, 3}, rng, 0.1f);
    w.conv3_b = Tensor::zeros({16}, true);
    w.conf_w = gaussian_tensor({1, 16, 1, 1}, rng, 0.1f);
    // low-confidence prior: negatives start nearly satisfied, so the heads
    // learn from object evidence instead of first crushing every anchor
    w.conf_b = Tensor::full({1}, -2.0f, true);
    w.box_w = gaussian_tensor({4, 16, 1, 1}, rng, 0.1f);
    w.box_b = Tensor::full({4}, 2.0f, true);
    return w;
}

int DetectorWeights::in_channels() const { return conv1_w.shape()[1]; }

std::vector<std::pair<std::string, Tensor>> DetectorWeights::named() const {
    return {{"conv1.weight", conv1_w}, {"conv1.bias", conv1_b}, {"conv2.weight", conv2_w},
            {"conv2.bias", conv2_b},   {"conv3.weight", conv3_w}, {"conv3.bias", conv3_b},
            {"conf.weight", conf_w},   {"conf.bias", conf_b},     {"box.weight", box_w},
            {"box.bias", box_b}};
}

std::vector<Tensor*> DetectorWeights::params() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w,
            &conv3_b, &conf_w,  &conf_b,  &box_w,   &box_b};
}

std::vector<const Tensor*> DetectorWeights::params() const {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w,
            &conv3_b, &conf_w,  &conf_b,  &box_w,   &box_b};
}

DetectorWeights DetectorWeights::clone() const {
    DetectorWeights w;
    auto src = params();
    auto dst = w.params();
    for (size_t i = 0; i < src.size(); ++i) {
        *dst[i] = src[i]->clone_detached();
        dst[i]->set_requires_grad(true);
    }
    return w;
}

uint64_t DetectorWeights::checksum() const {
    uint64_t h = 14695981039346656037ULL;
    for (const Tensor* t : params()) {
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(t->data());
        size_t n = static_cast<size_t>(t->numel()) * sizeof(float);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

ModelOutput detector_forward(const DetectorWeights& w, const Tensor& image) {
    require(image.shape().size() == 3, "detector: input must be [C,H,W]");
    require(image.shape()[0] == w.in_channels(), "detector: input has " + std::to_string(image.shape()[0]) + " channels, weights expect " +
                std::to_string(w.in_channels()));
    CPL_REQUIRE(image.shape()[1] % 2 == 0 && image.shape()[2] % 2 == 0, "detector: H and W must be divisible by 2, got " + shape_str(image.shape()));

    Tensor x = relu(conv2d(image, w.conv1_w, w.conv1_b, 1));
    x = avg_pool2(x);
    x = relu(conv2d(x, w.conv2_w, w.conv2_b, 1));
    x = relu(conv2d(x, w.conv3_w, w.conv3_b, 1));

    ModelOutput out;
    out.conf_map = sigmoid(conv2d(x, w.conf_w, w.conf_b, 0));
    out.box_map = relu(conv2d(x, w.box_w, w.box_b, 0));
    out.grid_h = out.conf_map.shape()[1];
    out.grid_w = out.conf_map.shape()[2];
    return out;
}

Tensor scene_input(const Scene& scene, int temporal_stack) {
    require(temporal_stack == 1 || temporal_stack == 3,
            "scene_input: temporal_stack must be 1 or 3");
    int h = scene.height, w = scene.width;
    // intensities are centred before the convs; an all-positive input starves
    // the first layer of usable gradients at this training budget
    if (temporal_stack == 1) {
        std::vector<float> data(scene.image.size());
        for (size_t i = 0; i < data.size(); ++i) data[i] = scene.image[i] - 0.5f;
        return Tensor::from_data({1, h, w}, std::move(data));
    }

    // three channels: identity plus one-pixel shifts, a stand-in for the
    // multi-frame input without any aggregation module
    std::vector<float> data(static_cast<size_t>(3) * h * w);
    const int shifts[3][2] = {{0, 0}, {1, 0}, {0, 1}}; // (dx, dy)
    for (int c = 0; c < 3; ++c) {
        int dx = shifts[c][0], dy = shifts[c][1];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int sx = std::clamp(x - dx, 0, w - 1);
                int sy = std::clamp(y - dy, 0, h - 1);
                data[(static_cast<size_t>(c) * h + y) * w + x] =
                    scene.image[static_cast<size_t>(sy) * w + sx] - 0.5f;
            }
    }
    return Tensor::from_data({3, h, w}, std::move(data));
}

AnchorAssignment assign_anchors(const std::vector<Box>& gt_boxes, int grid_h, int grid_w) {
    AnchorAssignment asg;
    asg.grid_h = grid_h;
    asg.grid_w = grid_w;
    asg.label.assign(static_cast<size_t>(grid_h) * grid_w, -1);
    asg.per_object.assign(gt_boxes.size(), {});

    // pass 1: capture by 50%-shrunk box, nearer centre wins ties
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            float cx = anchor_cx(gx), cy = anchor_cy(gy);
            int best = -1;
            float best_d2 = 0.0f;
            for (size_t j = 0; j < gt_boxes.size(); ++j) {
                const Box& b = gt_boxes[j];
                float hw = 0.25f * b.width(), hh = 0.25f * b.height();
                if (cx < b.cx() - hw || cx > b.cx() + hw || cy < b.cy() - hh || cy > b.cy() + hh)
                    continue;
                float dx = cx - b.cx(), dy = cy - b.cy();
                float d2 = dx * dx + dy * dy;
                if (best < 0 || d2 < best_d2) {
                    best = static_cast<int>(j);
                    best_d2 = d2;
                }
            }
            if (best >= 0) {
                int flat = gy * grid_w + gx;
                asg.label[flat] = best;
                asg.per_object[best].push_back(flat);
            }
        }
    }

    // pass 2: objects that captured nothing take their nearest anchor; if two
    // such objects want the same cell, the later one moves on to the next
    // nearest free cell
    for (size_t j = 0; j < gt_boxes.size(); ++j) {
        if (!asg.per_object[j].empty()) continue;
        const Box& b = gt_boxes[j];
        int best = -1;
        float best_d2 = 0.0f;
        for (int gy = 0; gy < grid_h; ++gy)
            for (int gx = 0; gx < grid_w; ++gx) {
                int flat = gy * grid_w + gx;
                if (asg.label[flat] >= 0 && asg.per_object[asg.label[flat]].size() <= 1)
                    continue; // do not steal another object's only anchor
                float dx = anchor_cx(gx) - b.cx(), dy = anchor_cy(gy) - b.cy();
                float d2 = dx * dx + dy * dy;
                if (best < 0 || d2 < best_d2) {
                    best = flat;
                    best_d2 = d2;
                }
            }
        require(best >= 0, "assign_anchors: no anchor available for forced assignment");
        int prev = asg.label[best];
        if (prev >= 0) {
            auto& lst = asg.per_object[prev];
            lst.erase(std::find(lst.begin(), lst.end(), best));
        }
        asg.label[best] = static_cast<int32_t>(j);
        asg.per_object[j].push_back(best);
    }
    return asg;
}

std::vector<Detection> decode(const ModelOutput& output, float conf_threshold, float nms_iou) {
    require(conf_threshold >= 0.0f && conf_threshold <= 1.0f, "decode: conf_threshold outside [0,1]");
    require(nms_iou >= 0.0f && nms_iou <= 1.0f, "decode: nms_iou outside [0,1]");

    const float* conf = output.conf_map.data();
    const float* boxm = output.box_map.data();
    int gh = output.grid_h, gw = output.grid_w;
    size_t plane = static_cast<size_t>(gh) * gw;

    std::vector<Detection> cands;
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            size_t flat = static_cast<size_t>(gy) * gw + gx;
            float score = conf[flat];
            if (score < conf_threshold) continue;
            float cx = anchor_cx(gx), cy = anchor_cy(gy);
            Detection d;
            d.score = score;
            d.box = Box{cx - boxm[flat], cy - boxm[plane + flat], cx + boxm[2 * plane + flat],
                        cy + boxm[3 * plane + flat]};
            cands.push_back(d);
        }

    std::stable_sort(cands.begin(), cands.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });

    std::vector<Detection> kept;
    std::vector<bool> dead(cands.size(), false);
    for (size_t i = 0; i < cands.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(cands[i]);
        for (size_t j = i + 1; j < cands.size(); ++j)
            if (!dead[j] && iou(cands[i].box, cands[j].box) >= nms_iou) dead[j] = true;
    }
    return kept;
}

} // namespace cpl
