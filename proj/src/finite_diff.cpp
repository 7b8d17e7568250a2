// SPDX-License-Identifier: Apache-2.0
#include "abmlora/finite_diff.hpp"

#include "abmlora/errors.hpp"

namespace abmlora {

Tensor2 finite_diff_grad(const ScalarFn& f, const Tensor2& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
  Tensor2 probe = x;
  Tensor2 grad(x.rows(), x.cols());
  auto p = probe.values();
  auto gv = grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = f(probe);
    p[i] = orig - h;
    const double down = f(probe);
    p[i] = orig;
    gv[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace abmlora
