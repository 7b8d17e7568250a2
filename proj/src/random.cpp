// SPDX-License-Identifier: Apache-2.0
#include "abmlora/random.hpp"

namespace abmlora {

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) noexcept {
  // FNV-1a over the tag, then a splitmix64 finalizer over the combination.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = base ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor2 random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor2 random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace abmlora
