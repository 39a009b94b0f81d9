#pragma once

#include <cstdint>
#include <random>

namespace ikv {

// splitmix64 step; used to derive independent stream seeds from a base seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard, so the
// same seed yields the same stream on every platform; the uniform mappings
// below avoid std::uniform_*_distribution, which is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform index in [0, n). Modulo bias is irrelevant at the sizes used here.
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

    // Derived seed for a substream (trial, sequence, ...).
    static std::uint64_t substream(std::uint64_t seed, std::uint64_t stream) {
        return splitmix64(seed ^ splitmix64(stream + 1));
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace ikv
