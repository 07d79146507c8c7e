#include "rectattn/rng.hpp"

namespace rectattn {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

std::uint64_t derive_seed(std::uint64_t parent, std::string_view component) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : component) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(parent ^ splitmix64(h));
}

std::uint64_t derive_seed(std::uint64_t parent, std::string_view component, std::uint64_t index) {
    return splitmix64(derive_seed(parent, component) + index);
}

} // namespace rectattn
