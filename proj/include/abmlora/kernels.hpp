// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision inner loops. Every kernel has a portable scalar
// reference and, on x86-64, an AVX2+FMA variant. The variant is chosen once at
// startup from CPUID and can be overridden (tests force each ISA in turn and
// compare results).
#pragma once

#include <cstddef>
#include <string_view>

namespace abmlora::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa) noexcept;

/// Best ISA the running CPU supports.
Isa detected_isa() noexcept;
/// ISA currently used by the dispatching entry points below.
Isa active_isa() noexcept;
bool isa_supported(Isa isa) noexcept;
/// Throws ConfigError when the CPU lacks the requested ISA.
void set_active_isa(Isa isa);

/// Squared-hinge sweep result: sum of terms and count of active (violating) entries.
struct HingeSums {
  double loss = 0.0;
  std::size_t active = 0;
};

/// Table of kernels for one ISA. All matrices are row-major and contiguous.
struct KernelTable {
  // c[m x n] = beta * c + alpha * a[m x k] * b[k x n]
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
               const double* b, double beta, double* c);
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // out = max(z, 0)
  void (*relu)(const double* z, double* out, std::size_t n);
  // gin += gout where z > 0
  void (*relu_backward)(const double* z, const double* gout, double* gin, std::size_t n);
  // Per entry t = max(0, m - tau*z); loss += scale * t^2 and
  // grad = -2 * scale * tau * t (0 where t == 0).
  HingeSums (*sq_hinge)(const double* z, const double* tau, double margin, double scale,
                        double* grad, std::size_t n);
};

const KernelTable& scalar_table() noexcept;
#if defined(ABMLORA_HAVE_AVX2)
const KernelTable& avx2_table() noexcept;
#endif

/// Table for the active ISA.
const KernelTable& active() noexcept;
const KernelTable& table_for(Isa isa);

}  // namespace abmlora::kernels
