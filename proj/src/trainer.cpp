// SPDX-License-Identifier: Apache-2.0
#include "abmlora/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "abmlora/errors.hpp"
#include "abmlora/graph.hpp"
#include "abmlora/random.hpp"

namespace abmlora {
namespace {

// Per-epoch shuffled minibatches.
class Batcher {
 public:
  Batcher(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), size_(batch_size), rng_(seed) {}

  Dataset next() {
    if (cursor_ >= order_.size()) {
      order_.resize(data_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t n = std::min(size_, order_.size() - cursor_);
    Dataset b = data_.subset(std::span(order_).subspan(cursor_, n));
    cursor_ += n;
    return b;
  }

 private:
  const Dataset& data_;
  std::size_t size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

std::vector<const Tensor2*> const_view(const std::vector<Tensor2>& v) {
  std::vector<const Tensor2*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}

std::vector<Tensor2*> mutable_view(std::vector<Tensor2>& v) {
  std::vector<Tensor2*> out;
  for (auto& t : v) out.push_back(&t);
  return out;
}

Tensor2 grad_or_zero(const Graph& g, Var v) {
  if (g.has_grad(v)) return g.grad(v);
  const Tensor2& val = g.value(v);
  return Tensor2(val.rows(), val.cols());
}

}  // namespace

Schedule parse_schedule(std::string_view name) {
  if (name == "constant") return Schedule::constant;
  if (name == "cosine") return Schedule::cosine;
  throw ConfigError("unknown schedule '" + std::string(name) + "'");
}

std::string_view schedule_name(Schedule s) noexcept {
  return s == Schedule::constant ? "constant" : "cosine";
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train.learning_rate must be positive");
  }
  if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw ConfigError("train.warmup_ratio must lie in [0, 1]");
  }
  if (max_grad_norm && !(*max_grad_norm > 0.0)) {
    throw ConfigError("train.max_grad_norm must be positive");
  }
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (max_steps && *max_steps == 0) throw ConfigError("train.max_steps must be at least 1");
}

std::size_t total_steps(const TrainConfig& cfg, std::size_t dataset_size) {
  const std::size_t per_epoch = (dataset_size + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min(total, *cfg.max_steps);
  return total;
}

double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t total) {
  const double peak = cfg.learning_rate;
  const auto warmup =
      static_cast<std::size_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(total)));
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (cfg.schedule == Schedule::constant) return peak;
  if (total <= warmup) return peak;
  const double progress = std::min(
      1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

bool ProbeSchedule::due(std::size_t step) const noexcept {
  if (!enabled) return false;
  if (step < dense_steps) return true;
  return every != 0 && step % every == 0;
}

TrainResult fine_tune(Model& model, const Dataset& train, const Dataset* eval,
                      const TrainConfig& cfg, const ProbeSchedule& probe, const StepHook& hook) {
  cfg.validate();
  if (train.size() == 0) throw DataError("fine_tune: the training set is empty");
  train.validate();
  std::vector<std::string> adapted;
  for (const auto& l : model.layers()) {
    if (l.adapter) adapted.push_back(l.name);
  }
  if (adapted.empty()) throw ConfigError("fine_tune: the model has no adapters attached");

  const std::size_t total = total_steps(cfg, train.size());
  Batcher batches(train, cfg.batch_size, derive_seed(cfg.seed, "train/shuffle"));
  Optimizer opt(cfg.optimizer, cfg.weight_decay);
  TrainResult res;

  for (std::size_t step = 0; step < total; ++step) {
    const Dataset batch = batches.next();
    StepRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, cfg, total);

    Graph g;
    const auto fw = model.forward(g, batch.inputs, WeightMode::adapted);
    const Var loss = g.softmax_cross_entropy(fw.logits, batch.labels);
    rec.train_loss = g.value(loss)(0, 0);
    if (!std::isfinite(rec.train_loss)) {
      throw NumericalError("fine_tune: training loss is not finite", step);
    }
    g.backward(loss);

    if (probe.due(step)) {
      Graph gb;
      const auto fb = model.forward(gb, batch.inputs, WeightMode::base_differentiable);
      gb.backward(gb.softmax_cross_entropy(fb.logits, batch.labels));
      InfoLossReport sum;
      sum.step = step;
      for (const auto& name : adapted) {
        const LoraAdapter& ad = *model.layer(name).adapter;
        const auto r = measure_decomposition(gb.grad(fb.weights.at(name)),
                                             grad_or_zero(g, fw.weights.at(name)), ad.a(), ad.b(),
                                             step);
        if (!within_bound(r)) ++rec.bound_violations;
        sum += r;
      }
      rec.info = sum;
      res.bound_violations += rec.bound_violations;
    }

    std::vector<Tensor2*> params;
    std::vector<Tensor2> grads;
    for (const auto& name : adapted) {
      LoraAdapter& ad = *model.layer(name).adapter;
      params.push_back(&ad.a());
      grads.push_back(grad_or_zero(g, fw.factor_a.at(name)));
      params.push_back(&ad.b());
      grads.push_back(grad_or_zero(g, fw.factor_b.at(name)));
    }
    if (cfg.max_grad_norm) clip_grad_norm(mutable_view(grads), *cfg.max_grad_norm);
    opt.step(params, const_view(grads), rec.lr);

    const bool last = step + 1 == total;
    if (eval && (last || (cfg.eval_every != 0 && (step + 1) % cfg.eval_every == 0))) {
      rec.eval_acc = evaluate(model, *eval);
    }
    if (hook) hook(rec, model);
    res.trace.push_back(std::move(rec));
  }
  res.adapters = model.adapters();
  res.final_eval_acc = evaluate(model, eval ? *eval : train);
  return res;
}

double pretrain(Model& model, const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw DataError("pretrain: the training set is empty");
  train.validate();
  if (!model.adapters().empty()) throw ConfigError("pretrain: detach adapters first");

  const std::size_t total = total_steps(cfg, train.size());
  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  Batcher batches(train, cfg.batch_size, derive_seed(cfg.seed, "pretrain/shuffle"));
  Optimizer opt(cfg.optimizer, cfg.weight_decay);
  double epoch_loss = 0.0;
  std::size_t epoch_steps = 0;
  for (std::size_t step = 0; step < total; ++step) {
    if (step % per_epoch == 0) {
      epoch_loss = 0.0;
      epoch_steps = 0;
    }
    const Dataset batch = batches.next();
    Graph g;
    const auto fw = model.forward(g, batch.inputs, WeightMode::base_differentiable);
    const Var loss = g.softmax_cross_entropy(fw.logits, batch.labels);
    const double l = g.value(loss)(0, 0);
    if (!std::isfinite(l)) throw NumericalError("pretrain: training loss is not finite", step);
    epoch_loss += l;
    ++epoch_steps;
    g.backward(loss);
    std::vector<Tensor2*> params;
    std::vector<Tensor2> grads;
    for (auto& layer : model.layers()) {
      params.push_back(&layer.w0);
      grads.push_back(grad_or_zero(g, fw.weights.at(layer.name)));
    }
    if (cfg.max_grad_norm) clip_grad_norm(mutable_view(grads), *cfg.max_grad_norm);
    opt.step(params, const_view(grads), lr_at(step, cfg, total));
  }
  return epoch_steps == 0 ? 0.0 : epoch_loss / static_cast<double>(epoch_steps);
}

double evaluate(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw DataError("evaluate: the dataset is empty");
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - start);
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), start);
    const Dataset chunk = data.subset(rows);
    const Tensor2 logits = model.logits(chunk.inputs);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.row(i);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == chunk.labels[i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace abmlora
