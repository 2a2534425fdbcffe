#include "cpl/adam.hpp"

#include <cmath>

namespace cpl {

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<std::vector<float>>& grads, AdamState& state, float lr) {
    CPL_REQUIRE(params.size() == grads.size(), "adam_step: " + std::to_string(params.size()) + " params vs " +
                std::to_string(grads.size()) + " grads");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->numel(), 0.0f);
            state.v[i].assign(params[i]->numel(), 0.0f);
        }
    }
    CPL_REQUIRE(state.m.size() == params.size(), "adam_step: state size mismatch");

    state.step += 1;
    float c1 = 1.0f - std::pow(kAdamBeta1, static_cast<float>(state.step));
    float c2 = 1.0f - std::pow(kAdamBeta2, static_cast<float>(state.step));

    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        CPL_REQUIRE(static_cast<int64_t>(grads[i].size()) == p.numel(),
                    "adam_step: grad shape mismatch for param " + std::to_string(i) + ": " +
                        std::to_string(grads[i].size()) + " values vs " + shape_str(p.shape()));
        float* pd = p.data();
        float* m = state.m[i].data();
        float* v = state.v[i].data();
        const float* g = grads[i].data();
        int64_t n = p.numel();
        for (int64_t j = 0; j < n; ++j) {
            m[j] = kAdamBeta1 * m[j] + (1.0f - kAdamBeta1) * g[j];
            v[j] = kAdamBeta2 * v[j] + (1.0f - kAdamBeta2) * g[j] * g[j];
            float mhat = m[j] / c1;
            float vhat = v[j] / c2;
            pd[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

} // namespace cpl
