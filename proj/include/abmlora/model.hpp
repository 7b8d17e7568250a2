// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "abmlora/graph.hpp"
#include "abmlora/lora.hpp"

namespace abmlora {

enum class Architecture { mlp, transformer };

Architecture parse_architecture(std::string_view name);
std::string_view architecture_name(Architecture arch) noexcept;

struct ModelSpec {
  Architecture arch = Architecture::mlp;
  std::size_t input_dim = 16;
  std::size_t num_classes = 3;
  Activation act = Activation::relu;
  // mlp: hidden widths, one "fcN" layer each, followed by "head".
  std::vector<std::size_t> hidden{32, 32};
  // transformer: the input row is split into `tokens` tokens of
  // input_dim / tokens features, embedded to model_dim, passed through one
  // attention + feed-forward block, mean-pooled and classified.
  std::size_t tokens = 4;
  std::size_t model_dim = 16;
  std::size_t ff_dim = 32;

  /// Throws ConfigError on inconsistent sizes.
  void validate() const;
};

/// Which weights a forward pass uses.
enum class WeightMode {
  adapted,              // W0 + delta where an adapter is attached
  base,                 // W0 only, adapters detached
  base_differentiable,  // W0 only, and each W0 is a graph param (pretraining, probes)
  adapted_differentiable,  // W0 + delta merged into one graph param per layer (probes)
};

/// Handles into a graph built by Model::forward.
struct GraphForward {
  Var logits;
  std::map<std::string, Var> layer_inputs;     // x fed to each layer
  std::map<std::string, Var> pre_activations;  // every layer's z = x W^T
  std::map<std::string, Var> activations;      // sigma(z); same node as z for identity layers
  std::map<std::string, Var> weights;          // effective weight node per layer
  std::map<std::string, Var> factor_a;         // adapter factor params (adapted mode)
  std::map<std::string, Var> factor_b;
};

/// A stack of named FrozenLinear layers. Base weights only change through
/// explicit full-parameter pretraining; adapter training touches A and B only.
class Model {
 public:
  Model() = default;
  /// Random base weights: N(0, 2/in) before a nonlinearity, N(0, 1/in) otherwise.
  static Model random(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const noexcept { return spec_; }

  std::span<const FrozenLinear> layers() const noexcept { return layers_; }
  std::span<FrozenLinear> layers() noexcept { return layers_; }
  bool has_layer(std::string_view name) const noexcept;
  /// Throws ConfigError for an unknown name.
  const FrozenLinear& layer(std::string_view name) const;
  FrozenLinear& layer(std::string_view name);
  std::vector<std::string> layer_names() const;

  /// Layers followed by a nonlinearity, shallow to deep. These are the layers
  /// whose pre-activations carry activation boundaries.
  std::vector<std::string> matchable_layers() const;
  /// Hidden fcN layers for the MLP (not the head); query/value projections for
  /// the transformer.
  std::vector<std::string> default_placement() const;

  /// Attach a fresh adapter to each named layer. Per-layer seeds derive from `seed`.
  void attach_adapters(std::span<const std::string> names, std::size_t rank, double alpha,
                       const InitScheme& scheme, std::uint64_t seed);
  void detach_adapters();
  std::vector<NamedAdapter> adapters() const;
  /// Replace adapters by layer name. Throws ConfigError on unknown layers or
  /// shape mismatches.
  void set_adapters(std::span<const NamedAdapter> adapters);
  /// Sum of r (d + k) over adapted layers.
  std::size_t trainable_parameter_count() const;
  /// Sum of d * k over adapted layers (what full fine-tuning would train).
  std::size_t adapted_full_parameter_count() const;

  GraphForward forward(Graph& g, const Tensor2& x, WeightMode mode) const;
  Tensor2 logits(const Tensor2& x, WeightMode mode = WeightMode::adapted) const;
  std::map<std::string, Tensor2> pre_activations(const Tensor2& x,
                                                 WeightMode mode = WeightMode::adapted) const;

 private:
  Var linear(Graph& g, Var x, const FrozenLinear& layer, WeightMode mode, GraphForward& fw) const;

  ModelSpec spec_;
  std::vector<FrozenLinear> layers_;
};

}  // namespace abmlora
