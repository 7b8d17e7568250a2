// SPDX-License-Identifier: Apache-2.0
#include "abmlora/optim.hpp"

#include <cmath>
#include <string>

#include "abmlora/errors.hpp"
#include "abmlora/kernels.hpp"

namespace abmlora {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

std::string_view optimizer_name(OptimizerKind kind) noexcept {
  return kind == OptimizerKind::sgd ? "sgd" : "adamw";
}

Optimizer::Optimizer(OptimizerKind kind, double weight_decay)
    : kind_(kind), weight_decay_(weight_decay) {
  if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be non-negative");
}

void Optimizer::step(std::span<Tensor2* const> params, std::span<const Tensor2* const> grads,
                     double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("optimizer: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " gradients");
  }
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      require_same_shape(*params[i], *grads[i], "optimizer");
      if (weight_decay_ != 0.0) {
        for (double& v : params[i]->values()) v *= 1.0 - lr * weight_decay_;
      }
      kernels::active().axpy(params[i]->size(), -lr, grads[i]->data(), params[i]->data());
    }
    return;
  }
  if (m_.empty()) {
    for (const Tensor2* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  if (m_.size() != params.size()) throw DimensionError("optimizer: parameter list changed");
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], *grads[i], "optimizer");
    auto p = params[i]->values();
    auto g = grads[i]->values();
    auto m = m_[i].values();
    auto v = v_[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (weight_decay_ != 0.0) p[j] -= lr * weight_decay_ * p[j];
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
}

double clip_grad_norm(std::span<Tensor2* const> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor2* g : grads) sq += frobenius_sq(*g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Tensor2* g : grads) {
      for (double& v : g->values()) v *= s;
    }
  }
  return norm;
}

}  // namespace abmlora
