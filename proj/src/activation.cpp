// SPDX-License-Identifier: Apache-2.0
#include "abmlora/activation.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "abmlora/errors.hpp"
#include "abmlora/kernels.hpp"

namespace abmlora {
namespace {

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation kind) noexcept {
  switch (kind) {
    case Activation::identity:
      return "identity";
    case Activation::relu:
      return "relu";
    case Activation::gelu:
      return "gelu";
    case Activation::silu:
      return "silu";
  }
  return "unknown";
}

double activate(double z, Activation kind) noexcept {
  switch (kind) {
    case Activation::identity:
      return z;
    case Activation::relu:
      return z > 0.0 ? z : 0.0;
    case Activation::gelu:
      return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2));
    case Activation::silu:
      return z * sigmoid(z);
  }
  return z;
}

double activation_derivative(double z, Activation kind) noexcept {
  switch (kind) {
    case Activation::identity:
      return 1.0;
    case Activation::relu:
      return z > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
      return cdf + z * pdf;
    }
    case Activation::silu: {
      const double s = sigmoid(z);
      return s * (1.0 + z * (1.0 - s));
    }
  }
  return 1.0;
}

Tensor2 activate(const Tensor2& z, Activation kind) {
  Tensor2 out(z.rows(), z.cols());
  if (kind == Activation::relu) {
    kernels::active().relu(z.data(), out.data(), z.size());
    return out;
  }
  auto zv = z.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < zv.size(); ++i) ov[i] = activate(zv[i], kind);
  return out;
}

Tensor2 activation_derivative(const Tensor2& z, Activation kind) {
  Tensor2 out(z.rows(), z.cols());
  auto zv = z.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < zv.size(); ++i) ov[i] = activation_derivative(zv[i], kind);
  return out;
}

}  // namespace abmlora
