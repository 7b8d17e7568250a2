// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "abmlora/tensor.hpp"

namespace abmlora {

using ScalarFn = std::function<double(const Tensor2&)>;

/// Central differences (f(x + h e_ij) - f(x - h e_ij)) / 2h for every entry.
/// Throws ConfigError unless h > 0.
Tensor2 finite_diff_grad(const ScalarFn& f, const Tensor2& x, double h = 1e-5);

}  // namespace abmlora
