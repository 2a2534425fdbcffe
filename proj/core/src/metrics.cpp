#include "cpl/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "cpl/error.hpp"

namespace cpl {

std::vector<bool> match_detections(const std::vector<Detection>& dets_sorted,
                                   const std::vector<Box>& gts, float iou_threshold) {
    for (size_t i = 1; i < dets_sorted.size(); ++i)
        require(dets_sorted[i - 1].score >= dets_sorted[i].score,
                "match_detections: detections must be sorted by descending score");

    std::vector<bool> flags(dets_sorted.size(), false);
    std::vector<bool> taken(gts.size(), false);
    for (size_t i = 0; i < dets_sorted.size(); ++i) {
        int best = -1;
        float best_iou = iou_threshold;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (taken[j]) continue;
            float v = iou(dets_sorted[i].box, gts[j]);
            if (v >= best_iou && (best < 0 || v > best_iou)) {
                best = static_cast<int>(j);
                best_iou = v;
            }
        }
        if (best >= 0) {
            flags[i] = true;
            taken[best] = true;
        }
    }
    return flags;
}

double voc07_ap(const std::vector<bool>& tp_flags, int n_gt) {
    require(n_gt >= 0, "voc07_ap: n_gt must be >= 0");
    // zero-gt convention: perfect silence scores 1, any (necessarily false)
    // detection scores 0
    if (n_gt == 0) return tp_flags.empty() ? 1.0 : 0.0;
    if (tp_flags.empty()) return 0.0;

    std::vector<double> recall(tp_flags.size()), precision(tp_flags.size());
    int tp = 0;
    for (size_t i = 0; i < tp_flags.size(); ++i) {
        if (tp_flags[i]) ++tp;
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }

    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
        double r = static_cast<double>(k) / 10.0;
        double pmax = 0.0;
        for (size_t i = 0; i < recall.size(); ++i)
            if (recall[i] >= r) pmax = std::max(pmax, precision[i]);
        ap += pmax;
    }
    return ap / 11.0;
}

float fdr(const std::vector<bool>& tp_flags) {
    if (tp_flags.empty()) return 0.0f;
    size_t fp = static_cast<size_t>(std::count(tp_flags.begin(), tp_flags.end(), false));
    return static_cast<float>(fp) / static_cast<float>(tp_flags.size());
}

namespace {

struct PooledDet {
    float score;
    Box box;
    size_t scene;
    uint64_t scene_uid; // stable tie-break independent of scene order
    int rank;           // within-scene rank (decode order)
};

EvalResult evaluate_pooled(std::vector<PooledDet>& pooled, const Dataset& test_set) {
    // global sort: score desc, then keys that do not depend on scene order
    std::sort(pooled.begin(), pooled.end(), [](const PooledDet& a, const PooledDet& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.scene_uid != b.scene_uid) return a.scene_uid < b.scene_uid;
        return a.rank < b.rank;
    });

    int n_gt = static_cast<int>(test_set.total_boxes());

    EvalResult res;
    for (float thr : eval_iou_thresholds()) {
        // per-scene greedy matching in global score order
        std::vector<std::vector<bool>> taken(test_set.scenes.size());
        for (size_t s = 0; s < test_set.scenes.size(); ++s)
            taken[s].assign(test_set.scenes[s].gt_boxes.size(), false);

        std::vector<bool> flags(pooled.size(), false);
        for (size_t i = 0; i < pooled.size(); ++i) {
            const auto& gts = test_set.scenes[pooled[i].scene].gt_boxes;
            auto& tk = taken[pooled[i].scene];
            int best = -1;
            float best_iou = thr;
            for (size_t j = 0; j < gts.size(); ++j) {
                if (tk[j]) continue;
                float v = iou(pooled[i].box, gts[j]);
                if (v >= best_iou && (best < 0 || v > best_iou)) {
                    best = static_cast<int>(j);
                    best_iou = v;
                }
            }
            if (best >= 0) {
                flags[i] = true;
                tk[best] = true;
            }
        }

        float ap = static_cast<float>(n_gt == 0 ? (pooled.empty() ? 1.0 : 0.0)
                                                 : voc07_ap(flags, n_gt));
        res.ap_per_threshold.push_back(ap);
        if (thr == 0.50f) {
            res.ap50 = ap;
            res.fdr = fdr(flags);
            int tp = 0;
            for (size_t i = 0; i < flags.size(); ++i) {
                if (flags[i]) ++tp;
                res.pr50.push_back({n_gt ? static_cast<float>(tp) / n_gt : 0.0f,
                                    static_cast<float>(tp) / static_cast<float>(i + 1)});
            }
        }
        if (thr == 0.75f) res.ap75 = ap;
    }
    float mean = 0.0f;
    for (float ap : res.ap_per_threshold) mean += ap;
    res.ap = res.ap_per_threshold.empty() ? 0.0f : mean / res.ap_per_threshold.size();
    return res;
}

} // namespace

EvalResult evaluate_detections(const std::vector<std::vector<Detection>>& per_scene,
                               const Dataset& test_set) {
    require(per_scene.size() == test_set.scenes.size(),
            "evaluate_detections: detection list count does not match scenes");
    std::vector<PooledDet> pooled;
    for (size_t s = 0; s < per_scene.size(); ++s)
        for (size_t k = 0; k < per_scene[s].size(); ++k)
            pooled.push_back({per_scene[s][k].score, per_scene[s][k].box, s,
                              test_set.scenes[s].scene_seed, static_cast<int>(k)});
    return evaluate_pooled(pooled, test_set);
}

EvalResult evaluate(const DetectorWeights& weights, const Dataset& test_set,
                    const DecodeParams& params, int threads) {
    require(!test_set.scenes.empty(), "evaluate: empty test set");

    std::vector<std::vector<Detection>> per_scene(test_set.scenes.size());
    int nthreads = std::max(1, threads);
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= test_set.scenes.size()) return;
            Tensor input = scene_input(test_set.scenes[i], test_set.config.temporal_stack);
            ModelOutput out = detector_forward(weights, input);
            per_scene[i] = decode(out, params.conf_threshold, params.nms_iou);
        }
    };
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return evaluate_detections(per_scene, test_set);
}

} // namespace cpl
