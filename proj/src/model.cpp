// SPDX-License-Identifier: Apache-2.0
#include "abmlora/model.hpp"

#include <algorithm>
#include <cmath>

#include "abmlora/errors.hpp"
#include "abmlora/random.hpp"

namespace abmlora {
namespace {

WeightMode inference_mode(WeightMode mode) {
  switch (mode) {
    case WeightMode::base_differentiable:
      return WeightMode::base;
    case WeightMode::adapted_differentiable:
      return WeightMode::adapted;
    default:
      return mode;
  }
}

}  // namespace

Architecture parse_architecture(std::string_view name) {
  if (name == "mlp") return Architecture::mlp;
  if (name == "transformer") return Architecture::transformer;
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

std::string_view architecture_name(Architecture arch) noexcept {
  return arch == Architecture::mlp ? "mlp" : "transformer";
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw ConfigError("model: input_dim must be positive");
  if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
  if (arch == Architecture::mlp) {
    if (hidden.empty()) throw ConfigError("model: mlp needs at least one hidden layer");
    if (std::find(hidden.begin(), hidden.end(), 0u) != hidden.end()) {
      throw ConfigError("model: hidden widths must be positive");
    }
  } else {
    if (tokens == 0 || input_dim % tokens != 0) {
      throw ConfigError("model: input_dim " + std::to_string(input_dim) +
                        " is not divisible into " + std::to_string(tokens) + " tokens");
    }
    if (model_dim == 0 || ff_dim == 0) throw ConfigError("model: transformer widths must be positive");
  }
}

Model Model::random(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  Rng rng(seed);
  auto make = [&](std::string name, std::size_t out, std::size_t in, Activation act) {
    const double var = (act == Activation::identity ? 1.0 : 2.0) / static_cast<double>(in);
    m.layers_.push_back({std::move(name), random_normal(out, in, std::sqrt(var), rng), act, {}});
  };
  if (spec.arch == Architecture::mlp) {
    std::size_t in = spec.input_dim;
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      make("fc" + std::to_string(i), spec.hidden[i], in, spec.act);
      in = spec.hidden[i];
    }
    make("head", spec.num_classes, in, Activation::identity);
  } else {
    const std::size_t tok = spec.input_dim / spec.tokens;
    const std::size_t dm = spec.model_dim;
    make("embed", dm, tok, Activation::identity);
    make("q_proj", dm, dm, Activation::identity);
    make("k_proj", dm, dm, Activation::identity);
    make("v_proj", dm, dm, Activation::identity);
    make("o_proj", dm, dm, Activation::identity);
    make("ffn_in", spec.ff_dim, dm, spec.act);
    make("ffn_out", dm, spec.ff_dim, Activation::identity);
    make("head", spec.num_classes, dm, Activation::identity);
  }
  return m;
}

bool Model::has_layer(std::string_view name) const noexcept {
  return std::any_of(layers_.begin(), layers_.end(),
                     [&](const FrozenLinear& l) { return l.name == name; });
}

const FrozenLinear& Model::layer(std::string_view name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return l;
  }
  throw ConfigError("model has no layer named '" + std::string(name) + "'");
}

FrozenLinear& Model::layer(std::string_view name) {
  return const_cast<FrozenLinear&>(std::as_const(*this).layer(name));
}

std::vector<std::string> Model::layer_names() const {
  std::vector<std::string> names;
  for (const auto& l : layers_) names.push_back(l.name);
  return names;
}

std::vector<std::string> Model::matchable_layers() const {
  std::vector<std::string> names;
  for (const auto& l : layers_) {
    if (l.act != Activation::identity) names.push_back(l.name);
  }
  return names;
}

std::vector<std::string> Model::default_placement() const {
  if (spec_.arch == Architecture::transformer) return {"q_proj", "v_proj"};
  return matchable_layers();
}

void Model::attach_adapters(std::span<const std::string> names, std::size_t rank, double alpha,
                            const InitScheme& scheme, std::uint64_t seed) {
  for (const auto& name : names) {
    FrozenLinear& l = layer(name);
    InitScheme per_layer = scheme;
    if (per_layer.kind == InitScheme::Kind::from_checkpoint && per_layer.entry.empty()) {
      per_layer.entry = name;
    }
    l.adapter = init_adapter(l.out_dim(), l.in_dim(), rank, alpha, per_layer,
                             derive_seed(seed, "adapter/" + name));
  }
}

void Model::detach_adapters() {
  for (auto& l : layers_) l.adapter.reset();
}

std::vector<NamedAdapter> Model::adapters() const {
  std::vector<NamedAdapter> out;
  for (const auto& l : layers_) {
    if (l.adapter) out.push_back({l.name, *l.adapter});
  }
  return out;
}

void Model::set_adapters(std::span<const NamedAdapter> adapters) {
  for (const auto& [name, ad] : adapters) {
    FrozenLinear& l = layer(name);
    if (ad.d() != l.out_dim() || ad.k() != l.in_dim()) {
      throw ConfigError("adapter for '" + name + "' is " + std::to_string(ad.d()) + "x" +
                        std::to_string(ad.k()) + " but the layer weight is " +
                        l.w0.shape_str());
    }
    l.adapter = ad;
  }
}

std::size_t Model::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    if (l.adapter) n += l.adapter->trainable_count();
  }
  return n;
}

std::size_t Model::adapted_full_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    if (l.adapter) n += l.w0.size();
  }
  return n;
}

Var Model::linear(Graph& g, Var x, const FrozenLinear& l, WeightMode mode,
                  GraphForward& fw) const {
  Var w;
  if (mode == WeightMode::base_differentiable) {
    w = g.param(l.w0);
  } else if (mode == WeightMode::adapted_differentiable) {
    w = g.param(merge(l));
  } else if (mode == WeightMode::adapted && l.adapter) {
    const Var a = g.param(l.adapter->a());
    const Var b = g.param(l.adapter->b());
    fw.factor_a[l.name] = a;
    fw.factor_b[l.name] = b;
    w = g.add(g.input(l.w0), g.scale(g.matmul(a, b), l.adapter->eta()));
  } else {
    w = g.input(l.w0);
  }
  fw.weights[l.name] = w;
  fw.layer_inputs[l.name] = x;
  const Var z = g.matmul_nt(x, w);
  fw.pre_activations[l.name] = z;
  const Var h = l.act == Activation::identity ? z : g.activation(z, l.act);
  fw.activations[l.name] = h;
  return h;
}

GraphForward Model::forward(Graph& g, const Tensor2& x, WeightMode mode) const {
  if (x.cols() != spec_.input_dim) {
    throw DimensionError("model input " + x.shape_str() + " does not have " +
                         std::to_string(spec_.input_dim) + " features");
  }
  GraphForward fw;
  if (spec_.arch == Architecture::mlp) {
    Var h = g.input(x);
    for (const auto& l : layers_) h = linear(g, h, l, mode, fw);
    fw.logits = h;
    return fw;
  }
  const std::size_t t = spec_.tokens;
  const Var tokens = g.reshape(g.input(x), x.rows() * t, spec_.input_dim / t);
  const Var e = linear(g, tokens, layer("embed"), mode, fw);
  const Var q = linear(g, e, layer("q_proj"), mode, fw);
  const Var k = linear(g, e, layer("k_proj"), mode, fw);
  const Var v = linear(g, e, layer("v_proj"), mode, fw);
  const Var o = linear(g, g.attention(q, k, v, t), layer("o_proj"), mode, fw);
  const Var h1 = g.add(e, o);
  const Var f = linear(g, linear(g, h1, layer("ffn_in"), mode, fw), layer("ffn_out"), mode, fw);
  const Var h2 = g.add(h1, f);
  fw.logits = linear(g, g.mean_rows(h2, t), layer("head"), mode, fw);
  return fw;
}

Tensor2 Model::logits(const Tensor2& x, WeightMode mode) const {
  Graph g;
  const auto fw = forward(g, x, inference_mode(mode));
  return g.value(fw.logits);
}

std::map<std::string, Tensor2> Model::pre_activations(const Tensor2& x, WeightMode mode) const {
  Graph g;
  const auto fw = forward(g, x, inference_mode(mode));
  std::map<std::string, Tensor2> out;
  for (const auto& [name, var] : fw.pre_activations) out.emplace(name, g.value(var));
  return out;
}

}  // namespace abmlora
