// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "abmlora/tensor.hpp"

namespace abmlora {

using Rng = std::mt19937_64;

/// Deterministically derive an independent stream seed from a base seed and a
/// purpose tag, so unrelated consumers of one run seed never share a stream.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) noexcept;

Tensor2 random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
Tensor2 random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng);

}  // namespace abmlora
