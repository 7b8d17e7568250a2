// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <string>

#include "abmlora/errors.hpp"
#include "abmlora/kernels.hpp"

namespace abmlora::kernels {
namespace {

bool cpu_has_avx2() noexcept {
#if defined(ABMLORA_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::atomic<Isa>& active_slot() noexcept {
  static std::atomic<Isa> slot{detected_isa()};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

Isa detected_isa() noexcept {
  static const Isa isa = cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
  return isa;
}

bool isa_supported(Isa isa) noexcept {
  return isa == Isa::scalar || (isa == Isa::avx2 && detected_isa() == Isa::avx2);
}

Isa active_isa() noexcept { return active_slot().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ConfigError("kernel ISA '" + std::string(isa_name(isa)) + "' not supported on this CPU");
  }
  active_slot().store(isa, std::memory_order_relaxed);
}

const KernelTable& table_for(Isa isa) {
  if (!isa_supported(isa)) {
    throw ConfigError("kernel ISA '" + std::string(isa_name(isa)) + "' not supported on this CPU");
  }
#if defined(ABMLORA_HAVE_AVX2)
  if (isa == Isa::avx2) return avx2_table();
#endif
  return scalar_table();
}

const KernelTable& active() noexcept {
#if defined(ABMLORA_HAVE_AVX2)
  if (active_isa() == Isa::avx2) return avx2_table();
#endif
  return scalar_table();
}

}  // namespace abmlora::kernels
