#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace cdg {

// Independent deterministic stream for (seed, stream). All randomness in the
// project goes through here so a single config seed reproduces every run.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

inline void fill_normal(std::mt19937_64& rng, std::span<double> out, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : out) {
        v = dist(rng);
    }
}

// FNV-1a, used for vocabulary hashing and stream derivation.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace cdg
