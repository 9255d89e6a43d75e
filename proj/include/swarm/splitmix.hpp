#pragma once

#include <cstdint>
#include <string_view>

namespace swarm {

/// SplitMix64 generator (Steele, Lea, Flood). Used for every deterministic
/// stream in the project: checkpoint weights, sampling, synthetic data.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t state) : state_(state) {}

    uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform float in [lo, hi); arithmetic done in double, then rounded once.
    float uniform(double lo, double hi) { return static_cast<float>(lo + (hi - lo) * uniform()); }

private:
    uint64_t state_;
};

/// FNV-1a 64-bit hash; keys per-tensor weight streams by their path.
constexpr uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace swarm
