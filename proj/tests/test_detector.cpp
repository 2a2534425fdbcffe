#include <doctest.h>

#include <algorithm>
#include <cstring>

#include "cpl/detector.hpp"
#include "cpl/rng.hpp"

using namespace cpl;

namespace {

// exhaustive scan: positive iff the anchor centre falls in the 50%-shrunk box,
// nearer object centre on ties
std::vector<int32_t> brute_force_labels(const std::vector<Box>& boxes, int gh, int gw) {
    std::vector<int32_t> label(static_cast<size_t>(gh) * gw, -1);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            float cx = anchor_cx(gx), cy = anchor_cy(gy);
            int best = -1;
            float best_d2 = 1e30f;
            for (size_t j = 0; j < boxes.size(); ++j) {
                const Box& b = boxes[j];
                float hw = 0.25f * b.width(), hh = 0.25f * b.height();
                if (cx >= b.cx() - hw && cx <= b.cx() + hw && cy >= b.cy() - hh &&
                    cy <= b.cy() + hh) {
                    float d2 = (cx - b.cx()) * (cx - b.cx()) + (cy - b.cy()) * (cy - b.cy());
                    if (d2 < best_d2) {
                        best_d2 = d2;
                        best = static_cast<int>(j);
                    }
                }
            }
            label[gy * gw + gx] = best;
        }
    return label;
}

} // namespace

TEST_CASE("forward shape contract at 64x64") {
    DetectorWeights w = DetectorWeights::init(1, 3);
    Tensor img = Tensor::zeros({1, 64, 64});
    ModelOutput out = detector_forward(w, img);
    CHECK(out.conf_map.shape() == Shape{1, 32, 32});
    CHECK(out.box_map.shape() == Shape{4, 32, 32});
    CHECK(out.grid_h == 32);
    CHECK(out.grid_w == 32);
}

TEST_CASE("zeroed heads give uniform confidence 0.5") {
    DetectorWeights w = DetectorWeights::init(1, 3);
    for (Tensor* t : {&w.conf_w, &w.conf_b, &w.box_w, &w.box_b})
        std::fill(t->data(), t->data() + t->numel(), 0.0f);
    ModelOutput out = detector_forward(w, Tensor::zeros({1, 64, 64}));
    for (int64_t i = 0; i < out.conf_map.numel(); ++i)
        CHECK(out.conf_map.data()[i] == doctest::Approx(0.5f));
    for (int64_t i = 0; i < out.box_map.numel(); ++i)
        CHECK(out.box_map.data()[i] == doctest::Approx(0.0f));
}

TEST_CASE("box offsets are non-negative by construction") {
    DetectorWeights w = DetectorWeights::init(1, 17);
    Rng rng(4);
    Tensor img = Tensor::zeros({1, 32, 32});
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = rng.uniform_f(0, 1);
    ModelOutput out = detector_forward(w, img);
    for (int64_t i = 0; i < out.box_map.numel(); ++i) CHECK(out.box_map.data()[i] >= 0.0f);
    for (int64_t i = 0; i < out.conf_map.numel(); ++i) {
        CHECK(out.conf_map.data()[i] > 0.0f);
        CHECK(out.conf_map.data()[i] < 1.0f);
    }
}

TEST_CASE("two forwards are bit-identical") {
    DetectorWeights w = DetectorWeights::init(1, 5);
    Rng rng(6);
    Tensor img = Tensor::zeros({1, 64, 64});
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = rng.uniform_f(0, 1);
    ModelOutput a = detector_forward(w, img);
    ModelOutput b = detector_forward(w, img);
    CHECK(std::memcmp(a.conf_map.data(), b.conf_map.data(),
                      sizeof(float) * a.conf_map.numel()) == 0);
    CHECK(std::memcmp(a.box_map.data(), b.box_map.data(),
                      sizeof(float) * a.box_map.numel()) == 0);
}

TEST_CASE("init is seed-deterministic and seeds differ") {
    DetectorWeights a = DetectorWeights::init(1, 10);
    DetectorWeights b = DetectorWeights::init(1, 10);
    DetectorWeights c = DetectorWeights::init(1, 11);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != c.checksum());
}

TEST_CASE("forward rejects wrong channel count and odd sizes") {
    DetectorWeights w = DetectorWeights::init(1, 3);
    CHECK_THROWS_AS(detector_forward(w, Tensor::zeros({2, 64, 64})), Error);
    CHECK_THROWS_AS(detector_forward(w, Tensor::zeros({1, 63, 64})), Error);
}

TEST_CASE("assign_anchors with no boxes marks everything negative") {
    AnchorAssignment asg = assign_anchors({}, 32, 32);
    for (int32_t l : asg.label) CHECK(l == -1);
    CHECK(asg.per_object.empty());
}

TEST_CASE("centered 16x16 box captures exactly the shrunk-region anchors") {
    std::vector<Box> boxes{{24, 24, 40, 40}};
    AnchorAssignment asg = assign_anchors(boxes, 32, 32);
    std::vector<int32_t> ref = brute_force_labels(boxes, 32, 32);
    CHECK(asg.label == ref);
    size_t expected = static_cast<size_t>(std::count(ref.begin(), ref.end(), 0));
    CHECK(asg.per_object[0].size() == expected);
    CHECK(expected == 16); // shrunk region [28,36]^2 holds centres 29,31,33,35
}

TEST_CASE("a box too small to capture an anchor forces exactly one") {
    // 3-pixel box centred at 30.2: the shrunk interval (29.45, 30.95)
    // straddles no odd-integer anchor centre
    std::vector<Box> boxes{{28.7f, 28.7f, 31.7f, 31.7f}};
    // confirm the premise with the oracle: no anchor centre inside the shrunk box
    std::vector<int32_t> ref = brute_force_labels(boxes, 32, 32);
    CHECK(std::count(ref.begin(), ref.end(), 0) == 0);

    AnchorAssignment asg = assign_anchors(boxes, 32, 32);
    REQUIRE(asg.per_object.size() == 1);
    CHECK(asg.per_object[0].size() == 1);
    // the forced anchor is the nearest one to the box centre
    int flat = asg.per_object[0][0];
    float cx = anchor_cx(flat % 32), cy = anchor_cy(flat / 32);
    CHECK(std::fabs(cx - boxes[0].cx()) <= 1.0f);
    CHECK(std::fabs(cy - boxes[0].cy()) <= 1.0f);
}

TEST_CASE("every object always has at least one positive anchor") {
    Rng rng(88);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Box> boxes;
        int n = rng.uniform_int(1, 4);
        for (int i = 0; i < n; ++i) {
            float x1 = rng.uniform_f(0, 56), y1 = rng.uniform_f(0, 56);
            float bw = rng.uniform_f(1.0f, 8.0f), bh = rng.uniform_f(1.0f, 8.0f);
            boxes.push_back({x1, y1, x1 + bw, y1 + bh});
        }
        AnchorAssignment asg = assign_anchors(boxes, 32, 32);
        for (const auto& lst : asg.per_object) CHECK(!lst.empty());
        // labels and per_object stay consistent
        size_t labelled = 0;
        for (int32_t l : asg.label)
            if (l >= 0) ++labelled;
        size_t listed = 0;
        for (const auto& lst : asg.per_object) listed += lst.size();
        CHECK(labelled == listed);
    }
}

TEST_CASE("assignment is permutation-equivariant in box order") {
    std::vector<Box> boxes{{10, 10, 22, 20}, {40, 36, 56, 52}, {30, 6, 38, 14}};
    AnchorAssignment a = assign_anchors(boxes, 32, 32);
    std::vector<Box> rev(boxes.rbegin(), boxes.rend());
    AnchorAssignment b = assign_anchors(rev, 32, 32);
    for (size_t j = 0; j < boxes.size(); ++j) {
        auto lhs = a.per_object[j];
        auto rhs = b.per_object[boxes.size() - 1 - j];
        std::sort(lhs.begin(), lhs.end());
        std::sort(rhs.begin(), rhs.end());
        CHECK(lhs == rhs);
    }
}

TEST_CASE("decode returns nothing when every score is below threshold") {
    DetectorWeights w = DetectorWeights::init(1, 3);
    for (Tensor* t : {&w.conf_w, &w.conf_b})
        std::fill(t->data(), t->data() + t->numel(), 0.0f); // conf 0.5 everywhere
    ModelOutput out = detector_forward(w, Tensor::zeros({1, 64, 64}));
    CHECK(decode(out, 0.9f, 0.45f).empty());
}

TEST_CASE("one hot anchor decodes to the encoded box") {
    ModelOutput out;
    out.grid_h = out.grid_w = 8;
    out.conf_map = Tensor::zeros({1, 8, 8});
    out.box_map = Tensor::zeros({4, 8, 8});
    int gy = 3, gx = 5, flat = gy * 8 + gx;
    out.conf_map.data()[flat] = 0.95f;
    float cx = anchor_cx(gx), cy = anchor_cy(gy);
    Box want{cx - 2.5f, cy - 1.0f, cx + 3.0f, cy + 2.0f};
    out.box_map.data()[flat] = 2.5f;
    out.box_map.data()[64 + flat] = 1.0f;
    out.box_map.data()[128 + flat] = 3.0f;
    out.box_map.data()[192 + flat] = 2.0f;
    auto dets = decode(out, 0.5f, 0.45f);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].score == doctest::Approx(0.95f));
    CHECK(dets[0].box.x1 == doctest::Approx(want.x1).epsilon(1e-4));
    CHECK(dets[0].box.y1 == doctest::Approx(want.y1).epsilon(1e-4));
    CHECK(dets[0].box.x2 == doctest::Approx(want.x2).epsilon(1e-4));
    CHECK(dets[0].box.y2 == doctest::Approx(want.y2).epsilon(1e-4));
}

TEST_CASE("NMS suppresses the lower-scored of two heavy overlaps") {
    ModelOutput out;
    out.grid_h = out.grid_w = 8;
    out.conf_map = Tensor::zeros({1, 8, 8});
    out.box_map = Tensor::zeros({4, 8, 8});
    auto put = [&](int flat, float score, float l, float t, float r, float b) {
        out.conf_map.data()[flat] = score;
        out.box_map.data()[flat] = l;
        out.box_map.data()[64 + flat] = t;
        out.box_map.data()[128 + flat] = r;
        out.box_map.data()[192 + flat] = b;
    };
    // neighbouring anchors (3,4) and (3,5) predict nearly the same box
    put(3 * 8 + 4, 0.9f, 4, 4, 4, 4);
    put(3 * 8 + 5, 0.8f, 5.6f, 4, 2.4f, 4);
    auto near = decode(out, 0.5f, 0.45f);
    float overlap = iou(Box{anchor_cx(4) - 4, anchor_cy(3) - 4, anchor_cx(4) + 4, anchor_cy(3) + 4},
                        Box{anchor_cx(5) - 5.6f, anchor_cy(3) - 4, anchor_cx(5) + 2.4f, anchor_cy(3) + 4});
    CHECK(overlap > 0.7f);
    REQUIRE(near.size() == 1);
    CHECK(near[0].score == doctest::Approx(0.9f));
    // a loose NMS threshold keeps both
    CHECK(decode(out, 0.5f, 0.95f).size() == 2);
}

TEST_CASE("decode count is monotone non-increasing in the confidence threshold") {
    DetectorWeights w = DetectorWeights::init(1, 21);
    Rng rng(3);
    Tensor img = Tensor::zeros({1, 64, 64});
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = rng.uniform_f(0, 1);
    ModelOutput out = detector_forward(w, img);
    size_t prev = static_cast<size_t>(-1);
    for (float thr : {0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f}) {
        size_t n = decode(out, thr, 0.45f).size();
        CHECK(n <= prev);
        prev = n;
    }
}

TEST_CASE("encode/decode round-trip reproduces a gt box at its positive anchors") {
    std::vector<Box> boxes{{12.25f, 8.5f, 30.75f, 27.0f}};
    AnchorAssignment asg = assign_anchors(boxes, 32, 32);
    REQUIRE(!asg.per_object[0].empty());
    ModelOutput out;
    out.grid_h = out.grid_w = 32;
    out.conf_map = Tensor::zeros({1, 32, 32});
    out.box_map = Tensor::zeros({4, 32, 32});
    size_t plane = 32 * 32;
    for (int32_t flat : asg.per_object[0]) {
        float cx = anchor_cx(flat % 32), cy = anchor_cy(flat / 32);
        out.conf_map.data()[flat] = 1.0f;
        out.box_map.data()[flat] = cx - boxes[0].x1;
        out.box_map.data()[plane + flat] = cy - boxes[0].y1;
        out.box_map.data()[2 * plane + flat] = boxes[0].x2 - cx;
        out.box_map.data()[3 * plane + flat] = boxes[0].y2 - cy;
    }
    // decode one positive anchor at a time: each must reproduce the gt box
    std::fill(out.conf_map.data(), out.conf_map.data() + out.conf_map.numel(), 0.0f);
    for (int32_t flat : asg.per_object[0]) {
        out.conf_map.data()[flat] = 1.0f;
        auto dets = decode(out, 0.5f, 0.45f);
        out.conf_map.data()[flat] = 0.0f;
        REQUIRE(dets.size() == 1);
        CHECK(std::fabs(dets[0].box.x1 - boxes[0].x1) < 1e-4f);
        CHECK(std::fabs(dets[0].box.y1 - boxes[0].y1) < 1e-4f);
        CHECK(std::fabs(dets[0].box.x2 - boxes[0].x2) < 1e-4f);
        CHECK(std::fabs(dets[0].box.y2 - boxes[0].y2) < 1e-4f);
    }
}

TEST_CASE("temporal stack produces a 3-channel input and matching forward") {
    Scene s;
    s.height = s.width = 16;
    s.image.assign(256, 0.25f);
    s.image[5 * 16 + 7] = 1.0f;
    Tensor single = scene_input(s, 1);
    CHECK(single.shape() == Shape{1, 16, 16});
    Tensor stacked = scene_input(s, 3);
    CHECK(stacked.shape() == Shape{3, 16, 16});
    // channel 0 is the identity copy; the others are one-pixel shifts
    // (inputs are centred, so the bright pixel reads 0.5)
    CHECK(single.data()[5 * 16 + 7] == doctest::Approx(0.5f));
    CHECK(stacked.data()[5 * 16 + 7] == doctest::Approx(0.5f));
    CHECK(stacked.data()[256 + 5 * 16 + 8] == doctest::Approx(0.5f));
    CHECK(stacked.data()[512 + 6 * 16 + 7] == doctest::Approx(0.5f));

    DetectorWeights w3 = DetectorWeights::init(3, 9);
    ModelOutput out = detector_forward(w3, stacked);
    CHECK(out.conf_map.shape() == Shape{1, 8, 8});
}
