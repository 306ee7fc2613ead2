#pragma once

#include <cstdint>
#include <random>

namespace pdose {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives the seed of child stream `index` from `seed`. Streams derived from
/// distinct indices are statistically independent for practical purposes.
constexpr std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return mix64(mix64(seed) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

}  // namespace pdose
