#pragma once

#include <cstdint>
#include <random>

namespace ldm {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based seed derivation: independent streams from one master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream)
{
    return splitmix64(splitmix64(master) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b)
{
    return derive_seed(derive_seed(master, a), b);
}

// Fisher-Yates with std::uniform_int_distribution; std::shuffle's algorithm is
// unspecified, this one is fixed.
template <class Vec>
void shuffle_in_place(Vec& v, Rng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(v[i - 1], v[pick(rng)]);
    }
}

} // namespace ldm
