// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string_view>

#include "abmlora/tensor.hpp"

namespace abmlora {

/// Pointwise nonlinearity. GELU is the exact erf form.
enum class Activation { identity, relu, gelu, silu };

/// Accepts "identity", "relu", "gelu", "silu"; anything else is a ConfigError.
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind) noexcept;

double activate(double z, Activation kind) noexcept;
/// sigma'(z). For ReLU the derivative at exactly 0 is 0 (the neuron is inactive).
double activation_derivative(double z, Activation kind) noexcept;

Tensor2 activate(const Tensor2& z, Activation kind);
Tensor2 activation_derivative(const Tensor2& z, Activation kind);

}  // namespace abmlora
