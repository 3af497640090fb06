#pragma once

#include <cstdint>
#include <random>

#include "mexd/core_types.hpp"

namespace mexd {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Child seed for an independent stream (bag index, chain index, ...):
// splitmix64(seed ^ splitmix64(stream)).
inline RngSeed derive_seed(RngSeed seed, std::uint64_t stream) {
  return RngSeed{splitmix64(seed.value ^ splitmix64(stream))};
}

inline Rng make_rng(RngSeed seed) { return Rng(seed.value); }

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

}  // namespace mexd
