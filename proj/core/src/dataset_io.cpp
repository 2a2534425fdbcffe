#include "cpl/dataset_io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cpl/error.hpp"

namespace cpl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kImageMagic[8] = {'C', 'P', 'L', 'I', 'M', 'G', '1', '\0'};

std::string scene_stem(size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05zu", index);
    return buf;
}

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(bool(is), "dataset: truncated image file header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

json scene_sidecar(const Scene& s) {
    json j;
    j["seed"] = s.scene_seed;
    j["boxes"] = json::array();
    for (const Box& b : s.gt_boxes) j["boxes"].push_back({b.x1, b.y1, b.x2, b.y2});
    j["difficulty"] = s.difficulty;
    j["noisy"] = json::array();
    for (bool f : s.noisy_flags) j["noisy"].push_back(f);
    return j;
}

json config_json(const SceneConfig& c) {
    json j;
    j["height"] = c.height;
    j["width"] = c.width;
    j["bird_count"] = {c.bird_count_min, c.bird_count_max};
    j["contrast_range"] = {c.contrast_lo, c.contrast_hi};
    j["radius_range"] = {c.radius_lo, c.radius_hi};
    j["clutter_blob_count"] = c.clutter_blob_count;
    j["label_noise_prob"] = c.label_noise_prob;
    j["seed"] = c.seed;
    j["temporal_stack"] = c.temporal_stack;
    if (c.hard_mix) {
        j["hard_mix"] = {{"fraction", c.hard_mix->fraction},
                         {"ultra_share", c.hard_mix->ultra_share},
                         {"faint_contrast", {c.hard_mix->faint_contrast_lo,
                                             c.hard_mix->faint_contrast_hi}},
                         {"ultra_contrast", {c.hard_mix->ultra_contrast_lo,
                                             c.hard_mix->ultra_contrast_hi}},
                         {"jitter_ultra", c.hard_mix->jitter_ultra}};
    }
    return j;
}

SceneConfig config_from_json(const json& j) {
    SceneConfig c;
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.bird_count_min = j.at("bird_count")[0].get<int>();
    c.bird_count_max = j.at("bird_count")[1].get<int>();
    c.contrast_lo = j.at("contrast_range")[0].get<float>();
    c.contrast_hi = j.at("contrast_range")[1].get<float>();
    c.radius_lo = j.at("radius_range")[0].get<float>();
    c.radius_hi = j.at("radius_range")[1].get<float>();
    c.clutter_blob_count = j.at("clutter_blob_count").get<int>();
    c.label_noise_prob = j.at("label_noise_prob").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.temporal_stack = j.value("temporal_stack", 1);
    if (j.contains("hard_mix")) {
        HardMix hm;
        hm.fraction = j["hard_mix"].at("fraction").get<double>();
        hm.ultra_share = j["hard_mix"].at("ultra_share").get<double>();
        hm.faint_contrast_lo = j["hard_mix"].at("faint_contrast")[0].get<float>();
        hm.faint_contrast_hi = j["hard_mix"].at("faint_contrast")[1].get<float>();
        hm.ultra_contrast_lo = j["hard_mix"].at("ultra_contrast")[0].get<float>();
        hm.ultra_contrast_hi = j["hard_mix"].at("ultra_contrast")[1].get<float>();
        hm.jitter_ultra = j["hard_mix"].at("jitter_ultra").get<bool>();
        c.hard_mix = hm;
    }
    return c;
}

} // namespace

void write_image_file(const fs::path& path, const Scene& scene) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), "dataset: cannot write " + path.string());
    os.write(kImageMagic, 8);
    write_u32(os, static_cast<uint32_t>(scene.height));
    write_u32(os, static_cast<uint32_t>(scene.width));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(scene.image.data()),
             static_cast<std::streamsize>(scene.image.size() * 4));
    require(bool(os), "dataset: short write to " + path.string());
}

Scene read_image_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), "dataset: cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    require(bool(is) && std::memcmp(magic, kImageMagic, 8) == 0,
            "dataset: bad magic in " + path.string());
    Scene s;
    s.height = static_cast<int>(read_u32(is));
    s.width = static_cast<int>(read_u32(is));
    require(s.height > 0 && s.width > 0 && s.height < 1 << 16 && s.width < 1 << 16,
            "dataset: implausible image size in " + path.string());
    s.image.resize(static_cast<size_t>(s.height) * s.width);
    is.read(reinterpret_cast<char*>(s.image.data()),
            static_cast<std::streamsize>(s.image.size() * 4));
    require(bool(is), "dataset: truncated image payload in " + path.string());
    return s;
}

void write_split(const fs::path& root, const Dataset& dataset) {
    fs::path dir = root / dataset.split;
    fs::create_directories(dir);
    for (size_t i = 0; i < dataset.scenes.size(); ++i) {
        const Scene& s = dataset.scenes[i];
        write_image_file(dir / (scene_stem(i) + ".img"), s);
        std::ofstream js(dir / (scene_stem(i) + ".json"));
        require(bool(js), "dataset: cannot write sidecar for scene " + std::to_string(i));
        js << scene_sidecar(s).dump(2) << "\n";
    }
    json split_meta;
    split_meta["split"] = dataset.split;
    split_meta["scenes"] = dataset.scenes.size();
    split_meta["base_seed"] = dataset.base_seed;
    std::ofstream ms(dir / "split.json");
    ms << split_meta.dump(2) << "\n";
}

Dataset read_split(const fs::path& root, const std::string& split) {
    fs::path dir = root / split;
    require(fs::exists(dir), "dataset: missing split directory " + dir.string());

    json manifest;
    {
        std::ifstream mf(root / "manifest.json");
        require(bool(mf), "dataset: missing manifest.json under " + root.string());
        mf >> manifest;
    }
    Dataset ds;
    ds.split = split;
    const json& split_meta = manifest.at("splits").at(split);
    // splits may specialize the config (e.g. the test split of hard-mix keeps
    // the visual mixture but no label jitter)
    ds.config = config_from_json(split_meta.contains("config") ? split_meta.at("config")
                                                               : manifest.at("config"));
    ds.base_seed = split_meta.at("base_seed").get<uint64_t>();

    size_t count = manifest.at("splits").at(split).at("scenes").get<size_t>();
    ds.scenes.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        Scene s = read_image_file(dir / (scene_stem(i) + ".img"));
        std::ifstream js(dir / (scene_stem(i) + ".json"));
        require(bool(js), "dataset: missing sidecar for scene " + std::to_string(i));
        json j;
        js >> j;
        s.scene_seed = j.at("seed").get<uint64_t>();
        for (const auto& jb : j.at("boxes"))
            s.gt_boxes.push_back(Box{jb[0].get<float>(), jb[1].get<float>(), jb[2].get<float>(),
                                     jb[3].get<float>()});
        s.difficulty = j.at("difficulty").get<std::vector<float>>();
        for (const auto& jf : j.at("noisy")) s.noisy_flags.push_back(jf.get<bool>());
        require(s.gt_boxes.size() == s.difficulty.size() &&
                    s.gt_boxes.size() == s.noisy_flags.size(),
                "dataset: inconsistent sidecar for scene " + std::to_string(i));
        ds.scenes.push_back(std::move(s));
    }
    return ds;
}

void write_manifest(const fs::path& root, const SceneConfig& config,
                    const std::vector<std::pair<std::string, const Dataset*>>& splits,
                    const std::string& preset) {
    fs::create_directories(root);
    json j;
    j["format"] = "cpl-dataset-v1";
    j["preset"] = preset;
    j["config"] = config_json(config);
    if (config.hard_mix) j["hard_fraction"] = config.hard_mix->fraction;
    j["splits"] = json::object();
    for (const auto& [name, ds] : splits) {
        j["splits"][name] = {{"scenes", ds->scenes.size()},
                             {"base_seed", ds->base_seed},
                             {"boxes", ds->total_boxes()},
                             {"config", config_json(ds->config)}};
    }
    std::ofstream os(root / "manifest.json");
    require(bool(os), "dataset: cannot write manifest under " + root.string());
    os << j.dump(2) << "\n";
}

} // namespace cpl
