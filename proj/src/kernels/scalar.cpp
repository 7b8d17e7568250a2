// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "abmlora/kernels.hpp"

namespace abmlora::kernels {
namespace {

void gemm(std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (beta == 0.0) {
      std::fill(crow, crow + n, 0.0);
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double s = alpha * a[i * k + p];
      if (s == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

double dot(const double* x, const double* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void relu(const double* z, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = z[i] > 0.0 ? z[i] : 0.0;
}

void relu_backward(const double* z, const double* gout, double* gin, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (z[i] > 0.0) gin[i] += gout[i];
  }
}

HingeSums sq_hinge(const double* z, const double* tau, double margin, double scale,
                   double* grad, std::size_t n) {
  HingeSums sums;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = margin - tau[i] * z[i];
    if (t > 0.0) {
      sums.loss += scale * t * t;
      grad[i] = -2.0 * scale * tau[i] * t;
      ++sums.active;
    } else {
      grad[i] = 0.0;
    }
  }
  return sums;
}

constexpr KernelTable kTable{&gemm, &dot, &axpy, &relu, &relu_backward, &sq_hinge};

}  // namespace

const KernelTable& scalar_table() noexcept { return kTable; }

}  // namespace abmlora::kernels
