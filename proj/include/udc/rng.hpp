#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace udc {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Mixes a base seed with a path of indices into an independent stream seed.
/// derive_seed(s, {i, j}) is stable across platforms and thread schedules.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(seed, path));
}

/// Uniform double in [0, 1) from the top 53 bits; independent of libstdc++'s
/// distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Seed-path tags so that every consumer draws from its own stream.
namespace stream {
inline constexpr std::uint64_t kSplit = 1;
inline constexpr std::uint64_t kEmbedding = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kTrainDropout = 5;
inline constexpr std::uint64_t kMonteCarlo = 6;
inline constexpr std::uint64_t kRandomDeferral = 7;
}  // namespace stream

}  // namespace udc
