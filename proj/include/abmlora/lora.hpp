// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "abmlora/activation.hpp"
#include "abmlora/tensor.hpp"

namespace abmlora {

/// Low-rank update delta = eta * A * B with A (d x r), B (r x k), eta = alpha / r.
class LoraAdapter {
 public:
  /// Throws DimensionError when A.cols() != B.rows(), ConfigError when the
  /// rank exceeds min(d, k) or alpha is not positive.
  LoraAdapter(Tensor2 a, Tensor2 b, double alpha, std::uint64_t seed = 0);

  const Tensor2& a() const noexcept { return a_; }
  const Tensor2& b() const noexcept { return b_; }
  // Mutable factor access for optimizers. Shapes must not change.
  Tensor2& a() noexcept { return a_; }
  Tensor2& b() noexcept { return b_; }

  std::size_t d() const noexcept { return a_.rows(); }
  std::size_t k() const noexcept { return b_.cols(); }
  std::size_t rank() const noexcept { return a_.cols(); }
  double alpha() const noexcept { return alpha_; }
  double eta() const noexcept { return alpha_ / static_cast<double>(rank()); }
  std::uint64_t seed() const noexcept { return seed_; }

  /// eta * A * B, shape d x k.
  Tensor2 delta() const;
  /// r * (d + k).
  std::size_t trainable_count() const noexcept { return a_.size() + b_.size(); }

  bool operator==(const LoraAdapter&) const = default;

 private:
  Tensor2 a_;
  Tensor2 b_;
  double alpha_;
  std::uint64_t seed_;
};

struct InitScheme {
  enum class Kind { kaiming_a_zero_b, orthogonal, gaussian, from_checkpoint };

  Kind kind = Kind::kaiming_a_zero_b;
  std::filesystem::path checkpoint;  // from_checkpoint only
  std::string entry;                 // adapter name in the checkpoint; empty = first

  /// "kaiming_a_zero_b", "orthogonal", "gaussian" or "checkpoint:<path>".
  static InitScheme parse(std::string_view text);
  std::string name() const;
};

/// Std of the Gaussian baseline factors.
inline constexpr double kGaussianInitStd = 0.02;

/// Factor initialization:
///  - kaiming_a_zero_b: A ~ N(0, 2/d), B = 0
///  - orthogonal: A = first r columns of Q from a QR of a seeded Gaussian, B = 0
///  - gaussian: A, B ~ N(0, 0.02^2)
///  - from_checkpoint: factors read from an adapter checkpoint
LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t rank, double alpha,
                         const InitScheme& scheme, std::uint64_t seed);

/// A frozen base weight W0 (out x in) with an optional adapter. Inputs are
/// batch x in, outputs batch x out: z = x (W0 + delta)^T, h = sigma(z).
struct FrozenLinear {
  std::string name;
  Tensor2 w0;
  Activation act = Activation::identity;
  std::optional<LoraAdapter> adapter;

  std::size_t out_dim() const noexcept { return w0.rows(); }
  std::size_t in_dim() const noexcept { return w0.cols(); }
};

struct LayerOutput {
  Tensor2 z;  // pre-activation
  Tensor2 h;  // sigma(z)
};

LayerOutput forward(const FrozenLinear& layer, const Tensor2& x);
/// Dense W0 + delta; W0 alone when no adapter is attached.
Tensor2 merge(const FrozenLinear& layer);

// Adapter checkpoint file: little-endian binary container.
//   "ABMLCKPT" | u32 version | u32 count |
//   count x { u32 name_len | name | u64 d | u64 k | u64 r | f64 alpha |
//             u64 seed | d*r f64 A | r*k f64 B }
// Doubles are stored as raw IEEE-754 bits, so load(save(x)) == x bit for bit.

struct NamedAdapter {
  std::string layer;
  LoraAdapter adapter;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedAdapter> adapters);
/// Throws DataError on a missing, truncated or foreign file.
std::vector<NamedAdapter> load_checkpoint(const std::filesystem::path& path);

}  // namespace abmlora
