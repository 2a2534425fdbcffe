#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "cpl/dataset_io.hpp"
#include "cpl/error.hpp"
#include "cpl/rng.hpp"
#include "cpl/scene.hpp"

using namespace cpl;

TEST_CASE("no birds requested means no boxes") {
    SceneConfig c;
    c.bird_count_min = 0;
    c.bird_count_max = 0;
    Scene s = generate_scene(c, 123);
    CHECK(s.gt_boxes.empty());
    CHECK(s.difficulty.empty());
    CHECK(s.noisy_flags.empty());
    CHECK(s.image.size() == 64u * 64u);
}

TEST_CASE("difficulty formula on the easy extreme") {
    CHECK(difficulty_score(1.0f, 206.0f) == doctest::Approx(0.0f));
    CHECK(difficulty_score(1.0f, 64.0f) == doctest::Approx(0.0f));
    CHECK(difficulty_score(0.5f, 128.0f) == doctest::Approx(0.5f));
    CHECK(difficulty_score(0.1f, 16.0f) == doctest::Approx(1.0f - 0.1f * 0.25f));
    // a scene generated at full contrast / max radius reports difficulty 0
    SceneConfig c;
    c.contrast_lo = c.contrast_hi = 1.0f;
    c.radius_lo = c.radius_hi = 8.0f;
    c.bird_count_min = c.bird_count_max = 1;
    Scene s = generate_scene(c, 5);
    REQUIRE(s.gt_boxes.size() == 1);
    CHECK(s.gt_boxes[0].area() >= kDifficultyRefArea);
    CHECK(s.difficulty[0] == doctest::Approx(0.0f));
}

TEST_CASE("same config and seed give bit-identical scenes") {
    SceneConfig c;
    c.bird_count_min = 1;
    c.label_noise_prob = 0.3;
    Scene a = generate_scene(c, 999);
    Scene b = generate_scene(c, 999);
    CHECK(a.image == b.image);
    REQUIRE(a.gt_boxes.size() == b.gt_boxes.size());
    for (size_t i = 0; i < a.gt_boxes.size(); ++i) {
        CHECK(a.gt_boxes[i].x1 == b.gt_boxes[i].x1);
        CHECK(a.difficulty[i] == b.difficulty[i]);
        CHECK(a.noisy_flags[i] == b.noisy_flags[i]);
    }
    Scene d = generate_scene(c, 1000);
    CHECK(a.image != d.image);
}

TEST_CASE("boxes stay inside the image and are well-formed") {
    SceneConfig c;
    c.bird_count_min = 1;
    c.bird_count_max = 3;
    c.label_noise_prob = 0.5; // stress the jitter path
    for (uint64_t seed = 0; seed < 200; ++seed) {
        Scene s = generate_scene(c, seed);
        for (const Box& b : s.gt_boxes) {
            CHECK(b.x1 >= 0.0f);
            CHECK(b.y1 >= 0.0f);
            CHECK(b.x2 <= static_cast<float>(s.width));
            CHECK(b.y2 <= static_cast<float>(s.height));
            CHECK(b.x1 < b.x2);
            CHECK(b.y1 < b.y2);
        }
    }
}

TEST_CASE("difficulty is monotone in contrast and area") {
    float prev = 2.0f;
    for (float contrast : {0.1f, 0.3f, 0.5f, 0.7f, 0.9f}) {
        float d = difficulty_score(contrast, 40.0f);
        CHECK(d <= prev);
        prev = d;
    }
    prev = 2.0f;
    for (float area : {4.0f, 16.0f, 36.0f, 64.0f, 120.0f}) {
        float d = difficulty_score(0.6f, area);
        CHECK(d <= prev);
        prev = d;
    }
}

TEST_CASE("dataset generation is seed-split deterministic") {
    SceneConfig c;
    Dataset one = generate_dataset(c, 1, 42);
    Scene direct = generate_scene(c, seed_hash(42, 0));
    CHECK(one.scenes[0].image == direct.image);

    Dataset a = generate_dataset(c, 5, 42);
    Dataset b = generate_dataset(c, 5, 43);
    bool any_diff = false;
    for (int i = 0; i < 5; ++i) any_diff |= a.scenes[i].image != b.scenes[i].image;
    CHECK(any_diff);
    CHECK_THROWS_AS(generate_dataset(c, 0, 1), Error);
}

TEST_CASE("difficulty histogram covers both tails under default ranges") {
    SceneConfig c;
    c.bird_count_min = 1;
    Dataset ds = generate_dataset(c, 1000, 7);
    float lo = 1.0f, hi = 0.0f;
    size_t n = 0;
    for (const Scene& s : ds.scenes)
        for (float d : s.difficulty) {
            lo = std::min(lo, d);
            hi = std::max(hi, d);
            ++n;
        }
    CHECK(n > 500);
    CHECK(lo < 0.2f);
    CHECK(hi > 0.8f);
}

TEST_CASE("easy_subset filters by difficulty and noise") {
    SceneConfig c;
    c.bird_count_min = 1;
    c.label_noise_prob = 0.25;
    Dataset ds = generate_dataset(c, 200, 11);

    SUBCASE("threshold 1 with clean labels is the identity on boxes") {
        SceneConfig clean = c;
        clean.label_noise_prob = 0.0;
        Dataset cds = generate_dataset(clean, 50, 13);
        Dataset kept = easy_subset(cds, 1.0f);
        CHECK(kept.total_boxes() == cds.total_boxes());
    }
    SUBCASE("threshold 0 removes all boxes but keeps scenes") {
        Dataset kept = easy_subset(ds, 0.0f);
        CHECK(kept.scenes.size() == ds.scenes.size());
        CHECK(kept.total_boxes() == 0);
    }
    SUBCASE("threshold 0.5 matches the brute-force count") {
        Dataset kept = easy_subset(ds, 0.5f);
        size_t expected = 0;
        for (const Scene& s : ds.scenes)
            for (size_t i = 0; i < s.gt_boxes.size(); ++i)
                if (s.difficulty[i] < 0.5f && !s.noisy_flags[i]) ++expected;
        CHECK(kept.total_boxes() == expected);
        for (const Scene& s : kept.scenes)
            for (size_t i = 0; i < s.gt_boxes.size(); ++i) {
                CHECK(s.difficulty[i] < 0.5f);
                CHECK_FALSE(s.noisy_flags[i]);
            }
    }
}

TEST_CASE("hard-mix draws faint or jittered boxes at roughly the set fraction") {
    SceneConfig c;
    c.contrast_lo = 0.55f;
    c.radius_lo = 4.0f;
    c.bird_count_min = 1;
    c.hard_mix = HardMix{};
    Dataset ds = generate_dataset(c, 500, 3);
    size_t hard = 0, total = 0;
    for (const Scene& s : ds.scenes)
        for (size_t i = 0; i < s.gt_boxes.size(); ++i) {
            ++total;
            if (s.difficulty[i] > 0.7f || s.noisy_flags[i]) ++hard;
        }
    double frac = static_cast<double>(hard) / static_cast<double>(total);
    CHECK(frac > 0.12);
    CHECK(frac < 0.30);
}

TEST_CASE("dataset files round-trip bit-exactly") {
    namespace fs = std::filesystem;
    fs::path root = fs::temp_directory_path() / "cpl_scene_roundtrip";
    fs::remove_all(root);

    SceneConfig c;
    c.bird_count_min = 1;
    c.label_noise_prob = 0.2;
    Dataset ds = generate_dataset(c, 12, 77, "train");
    write_split(root, ds);
    write_manifest(root, c, {{"train", &ds}}, "default");

    Dataset back = read_split(root, "train");
    REQUIRE(back.scenes.size() == ds.scenes.size());
    for (size_t i = 0; i < ds.scenes.size(); ++i) {
        const Scene& a = ds.scenes[i];
        const Scene& b = back.scenes[i];
        CHECK(a.image == b.image);
        REQUIRE(a.gt_boxes.size() == b.gt_boxes.size());
        for (size_t j = 0; j < a.gt_boxes.size(); ++j) {
            CHECK(std::memcmp(&a.gt_boxes[j], &b.gt_boxes[j], sizeof(Box)) == 0);
            CHECK(a.difficulty[j] == b.difficulty[j]);
            CHECK(a.noisy_flags[j] == b.noisy_flags[j]);
        }
        CHECK(a.scene_seed == b.scene_seed);
    }
    fs::remove_all(root);
}

TEST_CASE("image file rejects bad magic") {
    namespace fs = std::filesystem;
    fs::path p = fs::temp_directory_path() / "cpl_bad_magic.img";
    {
        std::ofstream os(p, std::ios::binary);
        os << "NOTMAGIC" << std::string(8, '\0');
    }
    CHECK_THROWS_WITH_AS(read_image_file(p), doctest::Contains("bad magic"), Error);
    fs::remove(p);
}

TEST_CASE("impossible placements shrink the bird count without error") {
    SceneConfig c;
    c.height = c.width = 24;
    c.radius_lo = c.radius_hi = 8.0f; // boxes ~14px on a 24px image
    c.bird_count_min = c.bird_count_max = 3;
    size_t max_seen = 0;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        Scene s = generate_scene(c, seed);
        max_seen = std::max(max_seen, s.gt_boxes.size());
        CHECK(s.gt_boxes.size() <= 3);
        for (const Box& b : s.gt_boxes) {
            CHECK(b.x2 <= 24.0f);
            CHECK(b.y2 <= 24.0f);
        }
    }
    CHECK(max_seen < 3); // three non-overlapping 14px boxes cannot fit
}
