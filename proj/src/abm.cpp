// SPDX-License-Identifier: Apache-2.0
#include "abmlora/abm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "abmlora/errors.hpp"
#include "abmlora/graph.hpp"
#include "abmlora/kernels.hpp"
#include "abmlora/random.hpp"

namespace abmlora {
namespace {

const Tensor2& find_layer(const std::vector<LayerCapture>& layers, std::string_view name) {
  for (const auto& l : layers) {
    if (l.layer == name) return l.z;
  }
  throw ConfigError("no capture for layer '" + std::string(name) + "'");
}

double sign_of(double z) { return z > 0.0 ? 1.0 : -1.0; }

void check_pairing(const ActivationCapture& z_ft, const MaskSnapshot& tau,
                   std::span<const double> weights) {
  if (z_ft.layers.size() != tau.layers.size() || weights.size() != z_ft.layers.size()) {
    throw DimensionError("abm loss: " + std::to_string(z_ft.layers.size()) + " captured layers, " +
                         std::to_string(tau.layers.size()) + " masks, " +
                         std::to_string(weights.size()) + " weights");
  }
  for (std::size_t l = 0; l < z_ft.layers.size(); ++l) {
    if (z_ft.layers[l].layer != tau.layers[l].layer) {
      throw DimensionError("abm loss: layer " + std::to_string(l) + " is '" +
                           z_ft.layers[l].layer + "' in the capture but '" + tau.layers[l].layer +
                           "' in the masks");
    }
    require_same_shape(z_ft.layers[l].z, tau.layers[l].z, "abm loss");
  }
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

Tensor2 gather_rows(const Tensor2& x, std::span<const std::size_t> rows) {
  Tensor2 out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.row(rows[i]).begin(), x.cols(), out.row(i).begin());
  }
  return out;
}

// Yields Stage-1 batches under the configured policy.
class BatchStream {
 public:
  BatchStream(const Tensor2& pool, const AbmConfig& cfg, std::uint64_t seed)
      : pool_(pool), size_(std::min(cfg.batch_size, pool.rows())), policy_(cfg.batch_policy),
        rng_(derive_seed(seed, "stage1/batches")) {
    order_ = permutation(pool.rows(), rng_);
  }

  Tensor2 next() {
    if (policy_ == BatchPolicy::fixed) {
      return gather_rows(pool_, std::span(order_).first(size_));
    }
    if (cursor_ + size_ > order_.size()) {
      order_ = permutation(pool_.rows(), rng_);
      cursor_ = 0;
    }
    Tensor2 b = gather_rows(pool_, std::span(order_).subspan(cursor_, size_));
    cursor_ += size_;
    return b;
  }

 private:
  const Tensor2& pool_;
  std::size_t size_;
  BatchPolicy policy_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

Model reference_model(const Model& model, const PretrainedRef& ref) {
  Model out = model;
  out.detach_adapters();
  if (ref.adapters) out.set_adapters(*ref.adapters);
  return out;
}

Stage1Record record(std::size_t step, const AbmLossEval& eval, const ActivationCapture& z,
                    const MaskSnapshot& tau) {
  Stage1Record r;
  r.step = step;
  r.loss = eval.loss;
  r.mismatch_rate = mismatch_rate(z, tau);
  for (double l : eval.layer_loss) r.layer_share.push_back(eval.loss > 0.0 ? l / eval.loss : 0.0);
  return r;
}

}  // namespace

const Tensor2& ActivationCapture::at(std::string_view layer) const {
  return find_layer(layers, layer);
}

const Tensor2& MaskSnapshot::at(std::string_view layer) const { return find_layer(layers, layer); }

ActivationCapture capture(const Model& model, const Tensor2& batch, CaptureSource source,
                          std::span<const std::string> layers) {
  for (const auto& name : layers) {
    if (model.layer(name).act == Activation::identity) {
      throw ConfigError("layer '" + name + "' has no nonlinearity to capture");
    }
  }
  auto z = model.pre_activations(batch, WeightMode::adapted);
  ActivationCapture out;
  out.source = source;
  for (const auto& name : layers) out.layers.push_back({name, std::move(z.at(name))});
  return out;
}

MaskSnapshot masks(const ActivationCapture& capture) {
  MaskSnapshot out;
  for (const auto& [name, z] : capture.layers) {
    Tensor2 tau(z.rows(), z.cols());
    auto dst = tau.values();
    auto src = z.values();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = sign_of(src[i]);
    out.layers.push_back({name, std::move(tau)});
  }
  return out;
}

namespace {

struct MismatchCount {
  std::size_t mismatched = 0;
  std::size_t total = 0;
};

MismatchCount count_mismatch(const ActivationCapture& finetuned, const MaskSnapshot& tau) {
  MismatchCount c;
  for (const auto& [name, z] : finetuned.layers) {
    const Tensor2& t = tau.at(name);
    require_same_shape(z, t, "mismatch_rate");
    auto zv = z.values();
    auto tv = t.values();
    for (std::size_t i = 0; i < zv.size(); ++i) c.mismatched += sign_of(zv[i]) != tv[i];
    c.total += zv.size();
  }
  return c;
}

double rate(const MismatchCount& c) {
  return c.total == 0 ? 0.0 : static_cast<double>(c.mismatched) / static_cast<double>(c.total);
}

}  // namespace

double mismatch_rate(const ActivationCapture& finetuned, const MaskSnapshot& tau) {
  return rate(count_mismatch(finetuned, tau));
}

Weighting parse_weighting(std::string_view name) {
  if (name == "uniform") return Weighting::uniform;
  if (name == "sequential") return Weighting::sequential;
  if (name == "quadratic") return Weighting::quadratic;
  throw ConfigError("unknown weighting '" + std::string(name) + "'");
}

std::string_view weighting_name(Weighting w) noexcept {
  switch (w) {
    case Weighting::uniform:
      return "uniform";
    case Weighting::sequential:
      return "sequential";
    case Weighting::quadratic:
      return "quadratic";
  }
  return "?";
}

std::vector<double> layer_weights(std::size_t num_layers, Weighting scheme) {
  if (num_layers == 0) throw ConfigError("layer_weights: need at least one layer");
  std::vector<double> w(num_layers, 1.0);
  if (scheme == Weighting::uniform) return w;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const double s = static_cast<double>(l + 1) / static_cast<double>(num_layers);
    w[l] = scheme == Weighting::sequential ? s : s * s;
  }
  return w;
}

AbmLossEval evaluate_abm(const ActivationCapture& z_ft, const MaskSnapshot& tau, double margin,
                         std::span<const double> weights) {
  check_pairing(z_ft, tau, weights);
  const auto& k = kernels::active();
  AbmLossEval out;
  for (std::size_t l = 0; l < z_ft.layers.size(); ++l) {
    const Tensor2& z = z_ft.layers[l].z;
    Tensor2 grad(z.rows(), z.cols());
    const double n = static_cast<double>(std::max<std::size_t>(z.rows(), 1));
    const double s = weights[l] * weights[l] / n;
    const auto sums = k.sq_hinge(z.data(), tau.layers[l].z.data(), margin, s, grad.data(), z.size());
    out.layer_loss.push_back(sums.loss);
    out.loss += sums.loss;
    out.violations += sums.active;
    out.grad.push_back(std::move(grad));
  }
  return out;
}

double abm_loss(const ActivationCapture& z_ft, const MaskSnapshot& tau, double margin,
                std::span<const double> weights) {
  return evaluate_abm(z_ft, tau, margin, weights).loss;
}

std::vector<Tensor2> abm_loss_grad(const ActivationCapture& z_ft, const MaskSnapshot& tau,
                                   double margin, std::span<const double> weights) {
  return evaluate_abm(z_ft, tau, margin, weights).grad;
}

LayerSelection LayerSelection::parse(std::string_view text) {
  LayerSelection s;
  if (text == "all") return s;
  if (text == "first_half") {
    s.preset = Preset::first_half;
    return s;
  }
  if (text == "last_half") {
    s.preset = Preset::last_half;
    return s;
  }
  s.preset = Preset::named;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    std::string_view item = text.substr(start, comma - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (item.empty()) throw ConfigError("layer selection '" + std::string(text) + "' has an empty entry");
    s.names.emplace_back(item);
    start = comma + 1;
  }
  return s;
}

std::string LayerSelection::str() const {
  switch (preset) {
    case Preset::all:
      return "all";
    case Preset::first_half:
      return "first_half";
    case Preset::last_half:
      return "last_half";
    case Preset::named:
      break;
  }
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ",") + n;
  return out;
}

std::vector<std::string> LayerSelection::resolve(std::span<const std::string> matchable) const {
  if (matchable.empty()) throw ConfigError("model has no layers with a nonlinearity");
  const std::size_t half = std::max<std::size_t>(1, matchable.size() / 2);
  switch (preset) {
    case Preset::all:
      return {matchable.begin(), matchable.end()};
    case Preset::first_half:
      return {matchable.begin(), matchable.begin() + static_cast<std::ptrdiff_t>(half)};
    case Preset::last_half:
      return {matchable.end() - static_cast<std::ptrdiff_t>(half), matchable.end()};
    case Preset::named:
      break;
  }
  if (names.empty()) throw ConfigError("layer selection is empty");
  for (const auto& n : names) {
    if (std::find(matchable.begin(), matchable.end(), n) == matchable.end()) {
      throw ConfigError("layer '" + n + "' is not a matchable layer");
    }
  }
  std::vector<std::string> out;
  for (const auto& m : matchable) {
    if (std::find(names.begin(), names.end(), m) != names.end()) out.push_back(m);
  }
  return out;
}

BatchPolicy parse_batch_policy(std::string_view name) {
  if (name == "fixed") return BatchPolicy::fixed;
  if (name == "cycle") return BatchPolicy::cycle;
  throw ConfigError("unknown batch policy '" + std::string(name) + "'");
}

std::string_view batch_policy_name(BatchPolicy p) noexcept {
  return p == BatchPolicy::fixed ? "fixed" : "cycle";
}

AbmScope parse_scope(std::string_view name) {
  if (name == "all") return AbmScope::all;
  if (name == "matched") return AbmScope::matched;
  throw ConfigError("unknown scope '" + std::string(name) + "'");
}

std::string_view scope_name(AbmScope s) noexcept { return s == AbmScope::all ? "all" : "matched"; }

void AbmConfig::validate() const {
  if (!(margin > 0.0) || !std::isfinite(margin)) throw ConfigError("abm.margin must be positive");
  if (steps == 0) throw ConfigError("abm.steps must be at least 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) {
    throw ConfigError("abm.step_size must be positive");
  }
  if (batch_size == 0) throw ConfigError("abm.batch_size must be at least 1");
  if (selection.preset == LayerSelection::Preset::named && selection.names.empty()) {
    throw ConfigError("abm.layers must not be empty");
  }
}

double pool_mismatch_rate(const Model& model, const Model& reference, const Tensor2& pool,
                          std::span<const std::string> layers) {
  constexpr std::size_t kChunk = 256;
  MismatchCount sum;
  for (std::size_t start = 0; start < pool.rows(); start += kChunk) {
    const std::size_t n = std::min(kChunk, pool.rows() - start);
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor2 chunk = gather_rows(pool, rows);
    const auto tau = masks(capture(reference, chunk, CaptureSource::pretrained, layers));
    const auto c = count_mismatch(capture(model, chunk, CaptureSource::finetuned, layers), tau);
    sum.mismatched += c.mismatched;
    sum.total += c.total;
  }
  return rate(sum);
}

Stage1Result run_stage1(Model& model, const PretrainedRef& reference, const Tensor2& pool,
                        const AbmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (pool.rows() == 0) throw DataError("stage 1: the input pool is empty");
  if (model.adapters().empty()) throw ConfigError("stage 1: the model has no adapters attached");

  const Model ref = reference_model(model, reference);
  Stage1Result res;
  const auto matchable = model.matchable_layers();
  res.layers = cfg.selection.resolve(matchable);
  const auto weights = layer_weights(res.layers.size(), cfg.weighting);

  std::vector<std::string> trainable;
  for (const auto& l : model.layers()) {
    if (!l.adapter) continue;
    const bool matched = std::find(res.layers.begin(), res.layers.end(), l.name) != res.layers.end();
    if (cfg.scope == AbmScope::all || matched) trainable.push_back(l.name);
  }
  if (trainable.empty()) {
    throw ConfigError("stage 1: scope 'matched' but no matched layer carries an adapter");
  }

  res.initial_pool_mismatch = pool_mismatch_rate(model, ref, pool, res.layers);
  BatchStream batches(pool, cfg, seed);
  Optimizer opt(cfg.optimizer);

  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    const Tensor2 x = batches.next();
    const auto tau = masks(capture(ref, x, CaptureSource::pretrained, res.layers));
    Graph g;
    const auto fw = model.forward(g, x, WeightMode::adapted);
    ActivationCapture z;
    z.source = CaptureSource::finetuned;
    for (const auto& name : res.layers) z.layers.push_back({name, g.value(fw.pre_activations.at(name))});
    const auto eval = evaluate_abm(z, tau, cfg.margin, weights);
    for (const auto& layer : z.layers) {
      if (!all_finite(layer.z)) throw NumericalError("stage 1: pre-activations of " + layer.layer + " are not finite", step);
    }
    if (!std::isfinite(eval.loss)) throw NumericalError("stage 1: boundary loss is not finite", step);
    res.trace.push_back(record(step, eval, z, tau));
    if (step == cfg.steps) break;

    std::vector<Graph::Seed> seeds;
    for (std::size_t l = 0; l < res.layers.size(); ++l) {
      seeds.push_back({fw.pre_activations.at(res.layers[l]), eval.grad[l]});
    }
    g.backward(seeds);

    std::vector<Tensor2*> params;
    std::vector<Tensor2> grads;
    for (const auto& name : trainable) {
      LoraAdapter& ad = *model.layer(name).adapter;
      const Var a = fw.factor_a.at(name);
      const Var b = fw.factor_b.at(name);
      params.push_back(&ad.a());
      grads.push_back(g.has_grad(a) ? g.grad(a) : Tensor2(ad.a().rows(), ad.a().cols()));
      params.push_back(&ad.b());
      grads.push_back(g.has_grad(b) ? g.grad(b) : Tensor2(ad.b().rows(), ad.b().cols()));
    }
    std::vector<const Tensor2*> grad_ptrs;
    for (const auto& t : grads) grad_ptrs.push_back(&t);
    opt.step(params, grad_ptrs, cfg.step_size);
    for (const Tensor2* t : params) {
      if (!all_finite(*t)) throw NumericalError("stage 1: adapter factors are not finite", step);
    }
  }

  res.final_pool_mismatch = pool_mismatch_rate(model, ref, pool, res.layers);
  res.adapters = model.adapters();
  return res;
}

}  // namespace abmlora
