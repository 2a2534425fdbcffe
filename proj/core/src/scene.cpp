#include "cpl/scene.hpp"

#include <cmath>

#include "cpl/error.hpp"
#include "cpl/rng.hpp"

namespace cpl {

float difficulty_score(float contrast, float box_area) {
    float v = 1.0f - contrast * std::min(1.0f, box_area / kDifficultyRefArea);
    return std::clamp(v, 0.0f, 1.0f);
}

namespace {

struct Blob {
    float cx, cy;      // centre, pixel coordinates
    float rx, ry;      // nominal radii; gaussian sigma is r/2
    float theta;       // rotation
    float contrast;    // peak amplitude above background
};

// Axis-aligned half-extents of the 20%-of-peak intensity contour.
void blob_extents(const Blob& b, float& half_w, float& half_h) {
    // contour: elliptical distance^2 = 2 ln 5 in sigma units
    float scale = std::sqrt(2.0f * std::log(5.0f));
    float a = 0.5f * b.rx * scale;
    float c = 0.5f * b.ry * scale;
    float ct = std::cos(b.theta), st = std::sin(b.theta);
    half_w = std::sqrt(a * a * ct * ct + c * c * st * st);
    half_h = std::sqrt(a * a * st * st + c * c * ct * ct);
}

Box blob_box(const Blob& b) {
    float hw, hh;
    blob_extents(b, hw, hh);
    return Box{b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh};
}

void render_blob(std::vector<float>& image, int h, int w, const Blob& b) {
    float sx = 0.5f * b.rx, sy = 0.5f * b.ry;
    float ct = std::cos(b.theta), st = std::sin(b.theta);
    float hw, hh;
    blob_extents(b, hw, hh);
    int x0 = std::max(0, static_cast<int>(std::floor(b.cx - hw - 2)));
    int x1 = std::min(w - 1, static_cast<int>(std::ceil(b.cx + hw + 2)));
    int y0 = std::max(0, static_cast<int>(std::floor(b.cy - hh - 2)));
    int y1 = std::min(h - 1, static_cast<int>(std::ceil(b.cy + hh + 2)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            float dx = (x + 0.5f) - b.cx;
            float dy = (y + 0.5f) - b.cy;
            float u = dx * ct + dy * st;
            float v = -dx * st + dy * ct;
            float d2 = (u * u) / (2.0f * sx * sx) + (v * v) / (2.0f * sy * sy);
            if (d2 > 12.0f) continue;
            float& px = image[static_cast<size_t>(y) * w + x];
            px = std::min(1.0f, px + b.contrast * std::exp(-d2));
        }
    }
}

// Jitter a labelled box by up to 40% of its size per coordinate, keeping it
// inside the image and at least half a pixel wide.
Box jitter_box(const Box& box, int h, int w, Rng& rng) {
    float bw = box.width(), bh = box.height();
    Box out;
    out.x1 = box.x1 + rng.uniform_f(-0.4f * bw, 0.4f * bw);
    out.x2 = box.x2 + rng.uniform_f(-0.4f * bw, 0.4f * bw);
    out.y1 = box.y1 + rng.uniform_f(-0.4f * bh, 0.4f * bh);
    out.y2 = box.y2 + rng.uniform_f(-0.4f * bh, 0.4f * bh);
    if (out.x2 < out.x1 + 0.5f) out.x2 = out.x1 + 0.5f;
    if (out.y2 < out.y1 + 0.5f) out.y2 = out.y1 + 0.5f;
    out.x1 = std::clamp(out.x1, 0.0f, static_cast<float>(w) - 0.5f);
    out.y1 = std::clamp(out.y1, 0.0f, static_cast<float>(h) - 0.5f);
    out.x2 = std::clamp(out.x2, out.x1 + 0.5f, static_cast<float>(w));
    out.y2 = std::clamp(out.y2, out.y1 + 0.5f, static_cast<float>(h));
    return out;
}

} // namespace

Scene generate_scene(const SceneConfig& config, uint64_t scene_seed) {
    require(config.height > 0 && config.width > 0, "generate_scene: empty image");
    require(config.bird_count_min >= 0 && config.bird_count_max >= config.bird_count_min,
            "generate_scene: bad bird_count range");
    require(config.contrast_hi >= config.contrast_lo && config.radius_hi >= config.radius_lo,
            "generate_scene: empty parameter range");
    require(config.label_noise_prob >= 0.0 && config.label_noise_prob <= 1.0,
            "generate_scene: label_noise_prob outside [0,1]");

    int h = config.height, w = config.width;
    Rng rng(scene_seed);
    Scene scene;
    scene.height = h;
    scene.width = w;
    scene.scene_seed = scene_seed;
    scene.image.assign(static_cast<size_t>(h) * w, 0.0f);

    // textured background: base level + a few low-frequency waves + grain
    float base = rng.uniform_f(0.30f, 0.42f);
    struct Wave { float fx, fy, phase, amp; };
    Wave waves[3];
    for (Wave& wv : waves) {
        wv.fx = rng.uniform_f(0.3f, 2.0f) / static_cast<float>(w);
        wv.fy = rng.uniform_f(0.3f, 2.0f) / static_cast<float>(h);
        wv.phase = rng.uniform_f(0.0f, 2.0f * static_cast<float>(M_PI));
        wv.amp = rng.uniform_f(0.015f, 0.05f);
    }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float v = base;
            for (const Wave& wv : waves)
                v += wv.amp * std::sin(2.0f * static_cast<float>(M_PI) *
                                           (wv.fx * x + wv.fy * y) + wv.phase);
            v += rng.uniform_f(-0.02f, 0.02f);
            scene.image[static_cast<size_t>(y) * w + x] = std::clamp(v, 0.0f, 1.0f);
        }

    // unlabelled clutter blobs, bright enough to contest faint birds
    for (int i = 0; i < config.clutter_blob_count; ++i) {
        Blob b;
        b.rx = rng.uniform_f(1.2f, 3.0f);
        b.ry = rng.uniform_f(1.2f, 3.0f);
        b.theta = rng.uniform_f(0.0f, static_cast<float>(M_PI));
        b.contrast = rng.uniform_f(0.06f, 0.18f);
        b.cx = rng.uniform_f(2.0f, static_cast<float>(w) - 2.0f);
        b.cy = rng.uniform_f(2.0f, static_cast<float>(h) - 2.0f);
        render_blob(scene.image, h, w, b);
    }

    // birds
    int target = rng.uniform_int(config.bird_count_min, config.bird_count_max);
    std::vector<Box> placed;
    for (int i = 0; i < target; ++i) {
        // two hard tiers: faint (dim, clean label) and ultra (nearly
        // invisible, jittered label) — label noise rides the hopeless tier
        bool hard_draw = false, ultra_draw = false;
        if (config.hard_mix && rng.bernoulli(config.hard_mix->fraction)) {
            hard_draw = true;
            ultra_draw = rng.bernoulli(config.hard_mix->ultra_share);
        }

        Blob b;
        if (hard_draw && ultra_draw) {
            b.contrast = rng.uniform_f(config.hard_mix->ultra_contrast_lo,
                                       config.hard_mix->ultra_contrast_hi);
        } else if (hard_draw) {
            b.contrast = rng.uniform_f(config.hard_mix->faint_contrast_lo,
                                       config.hard_mix->faint_contrast_hi);
        } else {
            b.contrast = rng.uniform_f(config.contrast_lo, config.contrast_hi);
        }
        b.rx = rng.uniform_f(config.radius_lo, config.radius_hi);
        b.ry = rng.uniform_f(config.radius_lo, config.radius_hi);
        b.theta = rng.uniform_f(0.0f, static_cast<float>(M_PI));

        float hw, hh;
        blob_extents(b, hw, hh);
        if (2 * hw >= w - 2 || 2 * hh >= h - 2) continue; // cannot fit

        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            b.cx = rng.uniform_f(hw + 1.0f, static_cast<float>(w) - hw - 1.0f);
            b.cy = rng.uniform_f(hh + 1.0f, static_cast<float>(h) - hh - 1.0f);
            Box candidate = blob_box(b);
            ok = true;
            for (const Box& other : placed)
                if (iou(candidate, other) > 0.05f) { ok = false; break; }
        }
        if (!ok) continue; // emit the scene with fewer birds

        render_blob(scene.image, h, w, b);
        Box clean = blob_box(b);
        placed.push_back(clean);

        bool noisy = (ultra_draw && config.hard_mix->jitter_ultra) ||
                     rng.bernoulli(config.label_noise_prob);
        Box stored = noisy ? jitter_box(clean, h, w, rng) : clean;
        scene.gt_boxes.push_back(stored);
        scene.difficulty.push_back(difficulty_score(b.contrast, clean.area()));
        scene.noisy_flags.push_back(noisy);
    }
    return scene;
}

Dataset generate_dataset(const SceneConfig& config, int n_scenes, uint64_t base_seed,
                         const std::string& split) {
    require(n_scenes > 0, "generate_dataset: n_scenes must be > 0");
    Dataset ds;
    ds.split = split;
    ds.config = config;
    ds.base_seed = base_seed;
    ds.scenes.reserve(static_cast<size_t>(n_scenes));
    for (int i = 0; i < n_scenes; ++i)
        ds.scenes.push_back(generate_scene(config, seed_hash(base_seed, static_cast<uint64_t>(i))));
    return ds;
}

Dataset easy_subset(const Dataset& dataset, float threshold) {
    require(threshold >= 0.0f && threshold <= 1.0f, "easy_subset: threshold outside [0,1]");
    Dataset out;
    out.split = dataset.split;
    out.config = dataset.config;
    out.base_seed = dataset.base_seed;
    out.scenes.reserve(dataset.scenes.size());
    for (const Scene& s : dataset.scenes) {
        Scene kept = s;
        kept.gt_boxes.clear();
        kept.difficulty.clear();
        kept.noisy_flags.clear();
        for (size_t i = 0; i < s.gt_boxes.size(); ++i) {
            if (s.difficulty[i] < threshold && !s.noisy_flags[i]) {
                kept.gt_boxes.push_back(s.gt_boxes[i]);
                kept.difficulty.push_back(s.difficulty[i]);
                kept.noisy_flags.push_back(false);
            }
        }
        out.scenes.push_back(std::move(kept));
    }
    return out;
}

} // namespace cpl
