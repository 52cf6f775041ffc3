#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cgdmer {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic sub-seed for a (seed, salt...) tuple. All per-subsystem
/// randomness is derived from the single user seed through this.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> salts) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t s : salts) h = splitmix64(h ^ splitmix64(s + 0x632be59bd9b4e019ULL));
  return h;
}

// Salts for derive_seed; fixed so that trajectories stay reproducible.
namespace salt {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kEcgMask = 2;
inline constexpr std::uint64_t kTextMask = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kSplit = 5;
inline constexpr std::uint64_t kProbe = 6;
inline constexpr std::uint64_t kCorpus = 7;
inline constexpr std::uint64_t kDropout = 8;
}  // namespace salt

}  // namespace cgdmer
