// SPDX-License-Identifier: Apache-2.0
//
// Geometry of what a LoRA update can and cannot see of the full gradient.
//
// For adapter factors A0 (d x r), B0 (r x k) and a full-weight gradient g
// (d x k), one gradient step on (A, B) moves the product A B along
//
//     P(g) = g B0^T B0 + A0 A0^T g
//
// (up to a (gamma * eta)^2 term). P is applied exactly as written: it is an
// orthogonal projector only when A0 has orthonormal columns and B0 = 0, and
// only in that regime do the decomposition identities hold exactly.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "abmlora/model.hpp"
#include "abmlora/tensor.hpp"

namespace abmlora {

/// Squared Frobenius norms describing how much of g a LoRA step discards.
struct InfoLossReport {
  std::size_t step = 0;
  double total = 0.0;        // ||g - P(grad_delta)||^2
  double unavoidable = 0.0;  // ||g - P(g)||^2, the low-rank loss
  double reducible = 0.0;    // ||P(g) - P(grad_delta)||^2, the boundary-mismatch loss
  double upper_bound = 0.0;  // ||g - grad_delta||^2, bounds `reducible`
  /// |total - (unavoidable + reducible)|. Zero only when P is an orthogonal projector.
  double pythagorean_residual = 0.0;

  /// Field-wise sum, for aggregating per-layer reports into one row.
  InfoLossReport& operator+=(const InfoLossReport& other) noexcept;
};

/// Relative slack allowed on reducible <= upper_bound before decompose() throws.
inline constexpr double kBoundSlack = 1e-9;

Tensor2 tangent_projection(const Tensor2& g, const Tensor2& a0, const Tensor2& b0);

/// ||g - P(g)||_F^2.
double info_loss(const Tensor2& g, const Tensor2& a0, const Tensor2& b0);

/// Takes one gradient step A1 = A0 - gamma*eta*g B0^T, B1 = B0 - gamma*eta*A0^T g
/// and returns ||(A1 B1 - A0 B0) + gamma*eta*P(g)||_F, the part of the update the
/// first-order expansion leaves out. Throws ConfigError for negative gamma.
double first_order_update_check(const Tensor2& a0, const Tensor2& b0, const Tensor2& g,
                                double gamma, double eta);

/// Fills every report field without checking the bound.
InfoLossReport measure_decomposition(const Tensor2& g, const Tensor2& grad_delta,
                                     const Tensor2& a0, const Tensor2& b0, std::size_t step = 0);
/// reducible <= upper_bound * (1 + kBoundSlack).
bool within_bound(const InfoLossReport& r) noexcept;
/// measure_decomposition() that throws ConsistencyError, stating the margin,
/// when the report is not within_bound().
InfoLossReport decompose(const Tensor2& g, const Tensor2& grad_delta, const Tensor2& a0,
                         const Tensor2& b0, std::size_t step = 0);

/// Full-weight gradients of the mean cross-entropy for one layer at the
/// model's base weights (all adapters detached) and at its adapted weights.
struct LayerGradients {
  Tensor2 base;     // g = dL/dW at W0
  Tensor2 adapted;  // dL/dW at W0 + delta
};

LayerGradients layer_gradients(const Model& model, const Tensor2& x,
                               const std::vector<std::size_t>& labels, const std::string& layer);

/// g - grad_delta for `layer`, computed by two complete backward passes: one
/// through `base` with adapters detached and one through `adapted`. The two
/// models must share architecture and base weights.
Tensor2 grad_diff_nonlinear(const Model& base, const Model& adapted, const Tensor2& x,
                            const std::vector<std::size_t>& labels, const std::string& layer);

/// The activation-mask form of the same difference: the backpropagated error
/// delta(x) and layer input are taken from the base pass and only sigma'
/// changes, mean_i [(sigma'(z_base) - sigma'(z_adapted)) * delta(x_i)] x_i^T.
/// Exactly zero whenever the two models agree on every activation mask.
Tensor2 mask_gradient_difference(const Model& base, const Model& adapted, const Tensor2& x,
                                 const std::vector<std::size_t>& labels,
                                 const std::string& layer);

}  // namespace abmlora
