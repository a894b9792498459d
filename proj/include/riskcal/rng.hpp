#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace riskcal {

using Rng = std::mt19937_64;

// SplitMix64 finalizer. All derived seeds in the library go through this.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Child stream `stream` of `parent`. Distinct streams of one parent are
// decorrelated, and the mapping does not depend on evaluation order, so
// parallel consumers see the same seeds as a serial run.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept {
  return mix_seed(mix_seed(parent) ^ mix_seed(stream + 0x632BE59BD9B4E019ULL));
}

// Uniformly random permutation of 0..n-1 (Fisher-Yates driven by std::shuffle).
inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace riskcal
