#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace rectattn {

using Rng = std::mt19937_64;

// Stable seed for a named component. Mixing is FNV-1a over the name followed
// by a splitmix64 finalizer, so sub-seeds do not depend on scheduling or on
// how many other components drew numbers first.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view component);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view component, std::uint64_t index);

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

// Uniform integer in [lo, hi] inclusive.
inline long uniform_int(Rng& rng, long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(rng);
}

} // namespace rectattn
