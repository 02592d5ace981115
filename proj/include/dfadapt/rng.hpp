#ifndef DFADAPT_RNG_HPP
#define DFADAPT_RNG_HPP

#include <cstdint>
#include <random>
#include <string>

namespace dfadapt {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive decorrelated sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
    return mix_seed(mix_seed(master ^ mix_seed(a)) ^ mix_seed(b + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace dfadapt

#endif
