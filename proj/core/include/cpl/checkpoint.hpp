#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cpl/adam.hpp"
#include "cpl/detector.hpp"

namespace cpl {

// Binary checkpoint: magic "CPLBC1\0\0", u32 version=1, u32 tensor count;
// per tensor u16 name length, name bytes, u8 ndim, u32 dims..., f32 payload
// (little endian); trailing u64 FNV-1a checksum over every byte between the
// 16-byte header and the checksum itself.
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

struct CheckpointMeta {
    std::string strategy; // encoded as a char-code tensor
    int epoch = 0;
};

// Weights plus optimizer moments and scalar metadata in one file.
void save_checkpoint(const std::filesystem::path& path, const DetectorWeights& weights,
                     const AdamState& opt, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    DetectorWeights weights;
    AdamState opt;
    CheckpointMeta meta;
};

// Shape table is validated against the fixed architecture; mismatches throw.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 14695981039346656037ULL);

} // namespace cpl
