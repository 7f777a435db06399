#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace naic {

// Counter-based splittable RNG (splitmix64 core). Streams obtained via
// fork() depend only on the parent state and the tag, never on how many
// draws the parent has made, so per-sample streams stay deterministic
// under batch parallelism and across resumes.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(mix(seed + kGamma)) {}

    Rng fork(uint64_t tag) const {
        Rng child(0);
        child.state_ = mix(state_ ^ mix(tag + kFork));
        return child;
    }

    Rng fork(std::string_view name) const { return fork(fnv1a(name)); }

    uint64_t next_u64() {
        state_ += kGamma;
        return mix(state_);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; consumes two uniforms per draw.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Integer in [0, n).
    int below(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // Index sampled from an unnormalized nonnegative weight vector.
    int categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0) || !std::isfinite(total))
            throw std::invalid_argument("Rng::categorical: weights must sum to a positive finite value");
        double r = uniform() * total;
        double cum = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            cum += weights[i];
            if (r < cum) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size() - 1);
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = below(i + 1);
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

private:
    static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ull;
    static constexpr uint64_t kFork = 0xd1b54a32d192ed03ull;

    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t state_;
};

}  // namespace naic
