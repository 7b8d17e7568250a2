// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "abmlora/tensor.hpp"

namespace abmlora {

/// Labeled inputs: one row per sample, one class index per row.
struct Dataset {
  Tensor2 inputs;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string name;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t features() const noexcept { return inputs.cols(); }
  /// Throws DataError on a row/label count mismatch, an out-of-range label or
  /// a non-finite input.
  void validate() const;
  /// Rows at the given indices, in that order.
  Dataset subset(std::span<const std::size_t> rows) const;
};

}  // namespace abmlora
