#pragma once

#include <cstdint>
#include <random>

namespace hsicomp {

// splitmix64, used to derive independent stream seeds from one master seed so
// that adding a consumer never shifts the draws of another.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream = 0) {
  return std::mt19937_64(mix_seed(seed, stream));
}

inline float uniform_float(std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> d(lo, hi);
  return d(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

}  // namespace hsicomp
