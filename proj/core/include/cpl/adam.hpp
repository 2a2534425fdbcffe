#pragma once

#include <vector>

#include "cpl/tensor.hpp"

namespace cpl {

// First/second moment buffers, one pair per parameter tensor.
struct AdamState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    int64_t step = 0;

    void reset() { m.clear(); v.clear(); step = 0; }
};

inline constexpr float kAdamBeta1 = 0.9f;
inline constexpr float kAdamBeta2 = 0.999f;
inline constexpr float kAdamEps = 1e-8f;

// One bias-corrected Adam update. `grads` are supplied explicitly (the
// training loop accumulates per-image gradients itself); sizes must match
// params elementwise. State buffers are created lazily on the first step.
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<std::vector<float>>& grads, AdamState& state, float lr);

} // namespace cpl
