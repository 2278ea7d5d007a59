#pragma once

#include <cstdint>
#include <random>

namespace kte {

// Named RNG substreams. Every stochastic component draws from its own
// stream derived from one master seed, so parallel execution order and
// the number of draws elsewhere never change a component's randomness.
enum class Stream : std::uint64_t {
    fold_split = 1,
    train_perm = 2,
    test_perm = 3,
    sigma_choice = 4,
    dgp = 5,
    oracle = 6,
    replicate = 7,
};

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    return mix64(mix64(seed ^ 0x6a09e667f3bcc908ULL) + static_cast<std::uint64_t>(stream)) + mix64(index);
}

inline std::mt19937_64 substream_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    return std::mt19937_64(substream_seed(seed, stream, index));
}

}  // namespace kte
