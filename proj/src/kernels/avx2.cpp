// SPDX-License-Identifier: Apache-2.0
//
// Compiled with -mavx2 -mfma. Only reached through the dispatcher after a
// CPUID check, so nothing here may run at static-initialization time.
#include <immintrin.h>

#include <algorithm>
#include <bit>

#include "abmlora/kernels.hpp"

namespace abmlora::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

void gemm(std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  const std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (beta == 0.0) {
      std::fill(crow, crow + n, 0.0);
    } else if (beta != 1.0) {
      const __m256d vb = _mm256_set1_pd(beta);
      std::size_t j = 0;
      for (; j < n4; j += 4) _mm256_storeu_pd(crow + j, _mm256_mul_pd(vb, _mm256_loadu_pd(crow + j)));
      for (; j < n; ++j) crow[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double s = alpha * a[i * k + p];
      if (s == 0.0) continue;
      const __m256d vs = _mm256_set1_pd(s);
      const double* brow = b + p * n;
      std::size_t j = 0;
      for (; j < n4; j += 4) {
        const __m256d acc = _mm256_loadu_pd(crow + j);
        _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(vs, _mm256_loadu_pd(brow + j), acc));
      }
      for (; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

double dot(const double* x, const double* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu(const double* z, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(z + i), zero));
  }
  for (; i < n; ++i) out[i] = z[i] > 0.0 ? z[i] : 0.0;
}

void relu_backward(const double* z, const double* gout, double* gin, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(z + i), zero, _CMP_GT_OQ);
    const __m256d g = _mm256_and_pd(mask, _mm256_loadu_pd(gout + i));
    _mm256_storeu_pd(gin + i, _mm256_add_pd(_mm256_loadu_pd(gin + i), g));
  }
  for (; i < n; ++i) {
    if (z[i] > 0.0) gin[i] += gout[i];
  }
}

HingeSums sq_hinge(const double* z, const double* tau, double margin, double scale,
                   double* grad, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d vm = _mm256_set1_pd(margin);
  const __m256d vs = _mm256_set1_pd(scale);
  const __m256d vg = _mm256_set1_pd(-2.0 * scale);
  __m256d acc = _mm256_setzero_pd();
  HingeSums sums;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vt = _mm256_loadu_pd(tau + i);
    const __m256d t = _mm256_fnmadd_pd(vt, _mm256_loadu_pd(z + i), vm);
    const __m256d mask = _mm256_cmp_pd(t, zero, _CMP_GT_OQ);
    const __m256d tp = _mm256_and_pd(mask, t);
    acc = _mm256_fmadd_pd(_mm256_mul_pd(vs, tp), tp, acc);
    _mm256_storeu_pd(grad + i, _mm256_mul_pd(_mm256_mul_pd(vg, vt), tp));
    sums.active += static_cast<std::size_t>(std::popcount(
        static_cast<unsigned>(_mm256_movemask_pd(mask))));
  }
  sums.loss = hsum(acc);
  for (; i < n; ++i) {
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

const KernelTable& avx2_table() noexcept { return kTable; }

}  // namespace abmlora::kernels
