#pragma once

#include <cstdint>
#include <random>

namespace sre {

using Rng = std::mt19937_64;

namespace detail {

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Order-sensitive hash of a seed with any number of integer keys.
template <typename... Keys>
constexpr std::uint64_t substream_seed(std::uint64_t seed, Keys... keys) {
    std::uint64_t h = detail::mix64(seed);
    ((h = detail::mix64(h ^ static_cast<std::uint64_t>(keys))), ...);
    return h;
}

/// Independent generator for (seed, keys...). Used to give every
/// (chain, column, variable) triple its own noise stream.
template <typename... Keys>
Rng substream(std::uint64_t seed, Keys... keys) {
    return Rng(substream_seed(seed, keys...));
}

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline double uniform01(Rng& rng) {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

}  // namespace sre
