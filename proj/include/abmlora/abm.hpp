// SPDX-License-Identifier: Apache-2.0
//
// Stage 1: activation boundary matching.
//
// Before task fine-tuning, the adapters are trained without labels so that
// every selected pre-activation of the adapted model sits on the same side of
// zero as the pretrained reference, with margin m:
//
//     L = (1/N) sum_i sum_l w_l^2 max(0, m - tau_il * z_il)^2,
//     tau = sgn(z_pretrained), sgn(0) = -1.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "abmlora/lora.hpp"
#include "abmlora/model.hpp"
#include "abmlora/optim.hpp"
#include "abmlora/tensor.hpp"

namespace abmlora {

enum class CaptureSource { pretrained, finetuned };

struct LayerCapture {
  std::string layer;
  Tensor2 z;  // batch x width, taken before the nonlinearity
};

/// Pre-activations of selected layers for one batch, in depth order.
struct ActivationCapture {
  CaptureSource source = CaptureSource::pretrained;
  std::vector<LayerCapture> layers;

  /// Throws ConfigError for a layer that was not captured.
  const Tensor2& at(std::string_view layer) const;
};

/// Per-layer signs, every entry exactly -1 or +1.
struct MaskSnapshot {
  std::vector<LayerCapture> layers;  // z holds tau
  const Tensor2& at(std::string_view layer) const;
};

/// One forward pass recording z for each named layer. Layers must exist and
/// carry a nonlinearity; the model is not modified.
ActivationCapture capture(const Model& model, const Tensor2& batch, CaptureSource source,
                          std::span<const std::string> layers);

/// tau = +1 where z > 0, -1 otherwise (z == 0 maps to -1, matching relu'(0) = 0).
MaskSnapshot masks(const ActivationCapture& capture);

/// Fraction of entries whose sign under the sgn(0) = -1 convention disagrees with tau.
double mismatch_rate(const ActivationCapture& finetuned, const MaskSnapshot& tau);

enum class Weighting { uniform, sequential, quadratic };

Weighting parse_weighting(std::string_view name);
std::string_view weighting_name(Weighting w) noexcept;

/// w_l for l = 0..L-1: uniform 1, sequential (l+1)/L, quadratic ((l+1)/L)^2.
/// The loss squares these again.
std::vector<double> layer_weights(std::size_t num_layers, Weighting scheme);

/// Loss with its per-entry gradient and per-layer contributions.
struct AbmLossEval {
  double loss = 0.0;
  std::vector<double> layer_loss;  // sums to `loss`
  std::vector<Tensor2> grad;       // dL/dz per layer
  std::size_t violations = 0;      // entries with m - tau z > 0
};

/// N is the row count of each captured z. Throws DimensionError when layer
/// names, shapes or the weight count disagree.
AbmLossEval evaluate_abm(const ActivationCapture& z_ft, const MaskSnapshot& tau, double margin,
                         std::span<const double> weights);
double abm_loss(const ActivationCapture& z_ft, const MaskSnapshot& tau, double margin,
                std::span<const double> weights);
/// Subgradient: -2 w_l^2 tau (m - tau z) / N where m - tau z > 0, else 0.
std::vector<Tensor2> abm_loss_grad(const ActivationCapture& z_ft, const MaskSnapshot& tau,
                                   double margin, std::span<const double> weights);

/// Which matchable layers the loss covers.
struct LayerSelection {
  enum class Preset { all, first_half, last_half, named };
  Preset preset = Preset::all;
  std::vector<std::string> names;  // Preset::named

  /// "all", "first_half", "last_half", or a comma-separated list of layer names.
  static LayerSelection parse(std::string_view text);
  std::string str() const;
  /// Subset of `matchable` (depth order preserved). Half presets keep
  /// max(1, L/2) layers. Throws ConfigError for names that are not matchable.
  std::vector<std::string> resolve(std::span<const std::string> matchable) const;
};

enum class BatchPolicy { fixed, cycle };
/// Which adapters Stage 1 updates: every attached adapter, or only those on
/// matched layers.
enum class AbmScope { all, matched };

BatchPolicy parse_batch_policy(std::string_view name);
std::string_view batch_policy_name(BatchPolicy p) noexcept;
AbmScope parse_scope(std::string_view name);
std::string_view scope_name(AbmScope s) noexcept;

struct AbmConfig {
  double margin = 0.5;
  std::size_t steps = 100;
  double step_size = 3e-4;
  LayerSelection selection;
  Weighting weighting = Weighting::sequential;
  BatchPolicy batch_policy = BatchPolicy::cycle;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::sgd;
  AbmScope scope = AbmScope::all;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Reference whose boundaries are matched: the base model (no adapters) or
/// the base model with adapters loaded from a checkpoint.
struct PretrainedRef {
  std::optional<std::vector<NamedAdapter>> adapters;
};

struct Stage1Record {
  std::size_t step = 0;
  double loss = 0.0;
  double mismatch_rate = 0.0;
  std::vector<double> layer_share;  // layer_loss / loss (0 when loss is 0)
};

struct Stage1Result {
  std::vector<std::string> layers;    // matched layers, depth order
  std::vector<Stage1Record> trace;    // rows 0..T-1 before each update, row T after the last
  std::vector<NamedAdapter> adapters; // trained adapters (also left in the model)
  double initial_pool_mismatch = 0.0;
  double final_pool_mismatch = 0.0;
};

/// Runs T steps on the model's adapters against the ABM loss. Only adapter
/// factors change. Throws DataError for an empty pool and NumericalError when
/// the loss stops being finite.
Stage1Result run_stage1(Model& model, const PretrainedRef& reference, const Tensor2& pool,
                        const AbmConfig& cfg, std::uint64_t seed);

/// Mismatch rate over a whole input set, evaluated in chunks.
double pool_mismatch_rate(const Model& model, const Model& reference, const Tensor2& pool,
                          std::span<const std::string> layers);

}  // namespace abmlora
