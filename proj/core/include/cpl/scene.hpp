#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpl/geometry.hpp"

namespace cpl {

// Mixture used by the hard-mix benchmark. A fraction of boxes is hard, in
// two tiers: faint birds (dim but learnable, clean labels) and ultra-faint
// birds that are close to invisible and carry jittered labels, so training
// on them is mostly harmful.
struct HardMix {
    double fraction = 0.2;     // share of boxes drawn hard
    double ultra_share = 0.35; // of the hard boxes, share in the ultra tier
    float faint_contrast_lo = 0.16f;
    float faint_contrast_hi = 0.28f;
    float ultra_contrast_lo = 0.02f;
    float ultra_contrast_hi = 0.08f;
    bool jitter_ultra = true;  // test splits disable the jitter, not the tier
};

struct SceneConfig {
    int height = 64;
    int width = 64;
    int bird_count_min = 0;
    int bird_count_max = 3;
    float contrast_lo = 0.1f;
    float contrast_hi = 1.0f;
    float radius_lo = 2.0f;
    float radius_hi = 8.0f;
    int clutter_blob_count = 4;
    double label_noise_prob = 0.0;
    uint64_t seed = 0;
    int temporal_stack = 1; // 1 = single frame; 3 = stack shifted copies as channels
    std::optional<HardMix> hard_mix;
};

// One synthetic image with its ground truth. `difficulty` is the generator's
// own easiness score (1 = hardest); only the ES strategy and diagnostics may
// look at it.
struct Scene {
    int height = 0;
    int width = 0;
    std::vector<float> image;        // H*W intensities in [0,1]
    std::vector<Box> gt_boxes;
    std::vector<float> difficulty;   // per box, in [0,1]
    std::vector<bool> noisy_flags;   // per box: label was jittered
    uint64_t scene_seed = 0;
};

struct Dataset {
    std::vector<Scene> scenes;
    std::string split = "train";
    SceneConfig config;
    uint64_t base_seed = 0;

    size_t total_boxes() const {
        size_t n = 0;
        for (const Scene& s : scenes) n += s.gt_boxes.size();
        return n;
    }
};

// Deterministic in (config, scene_seed). Birds are anisotropic gaussian blobs
// over low-frequency clutter; the gt box is the analytic 20%-of-peak contour
// bounding box. Placement failures shrink the bird count, never error.
Scene generate_scene(const SceneConfig& config, uint64_t scene_seed);

// Scene i uses seed_hash(base_seed, i).
Dataset generate_dataset(const SceneConfig& config, int n_scenes, uint64_t base_seed,
                         const std::string& split = "train");

// Keeps boxes with difficulty < threshold and a clean label; scenes whose
// boxes are all removed stay in the set as background-only scenes.
Dataset easy_subset(const Dataset& dataset, float threshold);

// difficulty = clamp(1 - contrast * min(1, area / 64), 0, 1)
float difficulty_score(float contrast, float box_area);

inline constexpr float kDifficultyRefArea = 64.0f;

} // namespace cpl
