// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "abmlora/tensor.hpp"

namespace abmlora {

enum class OptimizerKind { sgd, adamw };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view optimizer_name(OptimizerKind kind) noexcept;

/// Plain gradient descent or decoupled AdamW (beta = (0.9, 0.999), eps = 1e-8).
/// State is positional: step() must always receive the same parameter list.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind, double weight_decay = 0.0);

  /// params[i] -= update(grads[i]) at learning rate lr.
  void step(std::span<Tensor2* const> params, std::span<const Tensor2* const> grads, double lr);

  OptimizerKind kind() const noexcept { return kind_; }
  std::size_t steps_taken() const noexcept { return t_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  OptimizerKind kind_;
  double weight_decay_;
  std::size_t t_ = 0;
  std::vector<Tensor2> m_;
  std::vector<Tensor2> v_;
};

/// Scales every gradient in place so the global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor2* const> grads, double max_norm);

}  // namespace abmlora
