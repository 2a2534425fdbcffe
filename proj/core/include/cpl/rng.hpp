#pragma once

#include <cstdint>
#include <cmath>
#include <utility>
#include <vector>

namespace cpl {

// splitmix64: small, fast, and identical on every platform. All randomness in
// the project flows through this so runs are reproducible bit-for-bit.
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derives an independent stream seed; used for per-scene seeds, per-epoch
// batch shuffles, and the two model initializations.
inline uint64_t seed_hash(uint64_t seed, uint64_t index) {
    uint64_t s = seed ^ (0x2545f4914f6cdd1dULL + index * 0x9e3779b97f4a7c15ULL);
    return splitmix64(s);
}

inline uint64_t seed_hash(uint64_t seed, uint64_t a, uint64_t b) {
    return seed_hash(seed_hash(seed, a), b);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        if (hi <= lo) return lo;
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; consumes two draws per call so the stream stays predictable.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    float normal_f(float mean, float stddev) {
        return mean + stddev * static_cast<float>(normal());
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

} // namespace cpl
