// SPDX-License-Identifier: Apache-2.0
#include "abmlora/infoloss.hpp"

#include <cmath>
#include <sstream>

#include "abmlora/errors.hpp"

namespace abmlora {

InfoLossReport& InfoLossReport::operator+=(const InfoLossReport& other) noexcept {
  total += other.total;
  unavoidable += other.unavoidable;
  reducible += other.reducible;
  upper_bound += other.upper_bound;
  pythagorean_residual += other.pythagorean_residual;
  return *this;
}

namespace {

void check_factor_shapes(const Tensor2& g, const Tensor2& a0, const Tensor2& b0, const char* op) {
  if (a0.rows() != g.rows() || b0.cols() != g.cols() || a0.cols() != b0.rows()) {
    throw DimensionError(std::string(op) + ": gradient " + g.shape_str() + " with factors A " +
                         a0.shape_str() + " and B " + b0.shape_str());
  }
}

}  // namespace

Tensor2 tangent_projection(const Tensor2& g, const Tensor2& a0, const Tensor2& b0) {
  check_factor_shapes(g, a0, b0, "tangent_projection");
  // g B0^T B0 + A0 (A0^T g); the inner products are r-sized.
  Tensor2 out = matmul(matmul_nt(g, b0), b0);
  axpy_inplace(out, 1.0, matmul(a0, matmul_tn(a0, g)));
  return out;
}

double info_loss(const Tensor2& g, const Tensor2& a0, const Tensor2& b0) {
  return frobenius_sq(sub(g, tangent_projection(g, a0, b0)));
}

double first_order_update_check(const Tensor2& a0, const Tensor2& b0, const Tensor2& g,
                                double gamma, double eta) {
  check_factor_shapes(g, a0, b0, "first_order_update_check");
  if (gamma < 0.0) throw ConfigError("first_order_update_check: gamma must be non-negative");
  const double step = gamma * eta;
  const Tensor2 a1 = sub(a0, scale(matmul_nt(g, b0), step));
  const Tensor2 b1 = sub(b0, scale(matmul_tn(a0, g), step));
  Tensor2 residual = sub(matmul(a1, b1), matmul(a0, b0));
  axpy_inplace(residual, step, tangent_projection(g, a0, b0));
  return frobenius_norm(residual);
}

InfoLossReport measure_decomposition(const Tensor2& g, const Tensor2& grad_delta,
                                     const Tensor2& a0, const Tensor2& b0, std::size_t step) {
  require_same_shape(g, grad_delta, "decompose");
  check_factor_shapes(g, a0, b0, "decompose");
  const Tensor2 proj_g = tangent_projection(g, a0, b0);
  const Tensor2 proj_d = tangent_projection(grad_delta, a0, b0);
  InfoLossReport r;
  r.step = step;
  r.total = frobenius_sq(sub(g, proj_d));
  r.unavoidable = frobenius_sq(sub(g, proj_g));
  r.reducible = frobenius_sq(sub(proj_g, proj_d));
  r.upper_bound = frobenius_sq(sub(g, grad_delta));
  r.pythagorean_residual = std::abs(r.total - (r.unavoidable + r.reducible));
  return r;
}

bool within_bound(const InfoLossReport& r) noexcept {
  return r.reducible <= r.upper_bound * (1.0 + kBoundSlack);
}

InfoLossReport decompose(const Tensor2& g, const Tensor2& grad_delta, const Tensor2& a0,
                         const Tensor2& b0, std::size_t step) {
  InfoLossReport r = measure_decomposition(g, grad_delta, a0, b0, step);
  if (!within_bound(r)) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "non-expansiveness violated at step " << step << ": reducible " << r.reducible
        << " exceeds upper bound " << r.upper_bound << " by " << r.reducible - r.upper_bound;
    throw ConsistencyError(msg.str());
  }
  return r;
}

LayerGradients layer_gradients(const Model& model, const Tensor2& x,
                               const std::vector<std::size_t>& labels, const std::string& layer) {
  model.layer(layer);  // validates the name
  LayerGradients out;
  {
    Graph g;
    const auto fw = model.forward(g, x, WeightMode::base_differentiable);
    g.backward(g.softmax_cross_entropy(fw.logits, labels));
    out.base = g.grad(fw.weights.at(layer));
  }
  {
    Graph g;
    const auto fw = model.forward(g, x, WeightMode::adapted_differentiable);
    g.backward(g.softmax_cross_entropy(fw.logits, labels));
    out.adapted = g.grad(fw.weights.at(layer));
  }
  return out;
}

Tensor2 grad_diff_nonlinear(const Model& base, const Model& adapted, const Tensor2& x,
                            const std::vector<std::size_t>& labels, const std::string& layer) {
  if (!base.layer(layer).w0.same_shape(adapted.layer(layer).w0)) {
    throw DimensionError("grad_diff_nonlinear: models disagree on layer '" + layer + "'");
  }
  Tensor2 g_base;
  {
    Graph g;
    const auto fw = base.forward(g, x, WeightMode::base_differentiable);
    g.backward(g.softmax_cross_entropy(fw.logits, labels));
    g_base = g.grad(fw.weights.at(layer));
  }
  Tensor2 g_adapted;
  {
    Graph g;
    const auto fw = adapted.forward(g, x, WeightMode::adapted_differentiable);
    g.backward(g.softmax_cross_entropy(fw.logits, labels));
    g_adapted = g.grad(fw.weights.at(layer));
  }
  return sub(g_base, g_adapted);
}

Tensor2 mask_gradient_difference(const Model& base, const Model& adapted, const Tensor2& x,
                                 const std::vector<std::size_t>& labels,
                                 const std::string& layer) {
  const Activation act = base.layer(layer).act;
  if (act == Activation::identity) {
    throw ConfigError("mask_gradient_difference: layer '" + layer + "' has no nonlinearity");
  }
  Graph g;
  const auto fw = base.forward(g, x, WeightMode::base_differentiable);
  g.backward(g.softmax_cross_entropy(fw.logits, labels));
  const Tensor2& delta = g.grad(fw.activations.at(layer));
  const Tensor2& x_in = g.value(fw.layer_inputs.at(layer));
  const Tensor2& z_base = g.value(fw.pre_activations.at(layer));
  const Tensor2 z_adapted = adapted.pre_activations(x, WeightMode::adapted).at(layer);
  require_same_shape(z_base, z_adapted, "mask_gradient_difference");
  const Tensor2 mask_diff =
      sub(activation_derivative(z_base, act), activation_derivative(z_adapted, act));
  // delta already carries the 1/N of the batch-mean loss.
  return matmul_tn(hadamard(mask_diff, delta), x_in);
}

}  // namespace abmlora
