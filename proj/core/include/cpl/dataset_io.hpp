#pragma once

#include <filesystem>
#include <string>

#include "cpl/scene.hpp"

namespace cpl {

// On-disk dataset layout:
//   <root>/manifest.json            config echo, per-split seeds and counts
//   <root>/<split>/scene_00000.img  "CPLIMG1\0", u32 H, u32 W, then H*W
//                                   little-endian float32 intensities
//   <root>/<split>/scene_00000.json boxes, difficulty, noisy flags, seed

void write_split(const std::filesystem::path& root, const Dataset& dataset);
Dataset read_split(const std::filesystem::path& root, const std::string& split);

void write_manifest(const std::filesystem::path& root, const SceneConfig& config,
                    const std::vector<std::pair<std::string, const Dataset*>>& splits,
                    const std::string& preset);

void write_image_file(const std::filesystem::path& path, const Scene& scene);
Scene read_image_file(const std::filesystem::path& path); // boxes come from the sidecar

} // namespace cpl
