// SPDX-License-Identifier: Apache-2.0
#include "support/construct.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "abmlora/finite_diff.hpp"
#include "abmlora/graph.hpp"
#include "abmlora/lora.hpp"
#include "abmlora/random.hpp"
#include "support/oracles.hpp"

namespace construct {

using namespace abmlora;

BridgeCase make_bridge_case(std::uint64_t seed, bool flip) {
  ModelSpec spec;
  spec.input_dim = 6;
  spec.hidden = {8};
  spec.num_classes = 3;
  spec.act = Activation::relu;

  BridgeCase c;
  c.base = Model::random(spec, seed);
  const std::size_t n = 10;
  c.x = oracle::gaussian(n, spec.input_dim, 1.0, seed + 1);
  for (std::size_t i = 0; i < n; ++i) c.x(i, 0) = 0.5 + std::abs(c.x(i, 0));
  c.x(0, 1) = std::abs(c.x(0, 1)) + 0.1;  // at least one sample can flip
  Rng rng(seed + 2);
  for (std::size_t i = 0; i < n; ++i) c.labels.push_back(rng() % spec.num_classes);

  Tensor2& w = c.base.layer("fc0").w0;
  for (std::size_t j = 0; j < w.cols(); ++j) w(c.neuron, j) = j == 0 ? -1.0 : 0.0;

  Tensor2 row(1, spec.input_dim);
  if (!flip) {
    for (std::size_t j = 0; j < row.cols(); ++j) row(0, j) = 0.5 * w(c.neuron, j);
  } else {
    std::vector<std::pair<double, std::size_t>> thresholds;
    for (std::size_t i = 0; i < n; ++i) {
      if (c.x(i, 1) > 0.0) thresholds.emplace_back(c.x(i, 0) / c.x(i, 1), i);
    }
    std::sort(thresholds.begin(), thresholds.end());
    const double t = thresholds.size() > 1
                         ? 0.5 * (thresholds[0].first + thresholds[1].first)
                         : 2.0 * thresholds[0].first;
    row(0, 1) = t;
    c.flipped_sample = thresholds[0].second;
  }

  c.a0 = Tensor2(w.rows(), 1);
  c.a0(c.neuron, 0) = 1.0;
  c.b0 = row;
  c.adapted = c.base;
  const std::vector<NamedAdapter> ad{{c.layer, LoraAdapter(c.a0, c.b0, 1.0, seed)}};
  c.adapted.set_adapters(ad);
  return c;
}

namespace {

double min_abs_pre_activation(const Model& m, const Tensor2& x, WeightMode mode) {
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& [name, z] : m.pre_activations(x, mode)) {
    if (m.layer(name).act == Activation::identity) continue;
    for (double v : z.values()) lo = std::min(lo, std::abs(v));
  }
  return lo;
}

}  // namespace

GradCheck gradient_check(Activation act, std::uint64_t seed) {
  ModelSpec spec;
  spec.input_dim = 5;
  spec.hidden = {6, 4};
  spec.num_classes = 3;
  spec.act = act;
  const std::vector<std::string> placement{"fc0", "fc1"};

  GradCheck out;
  Model model;
  Tensor2 x;
  std::vector<std::size_t> labels;
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t s = derive_seed(seed, "gradcheck/" + std::to_string(attempt));
    model = Model::random(spec, s);
    InitScheme gauss;
    gauss.kind = InitScheme::Kind::gaussian;
    model.attach_adapters(placement, 2, 4.0, gauss, s);
    // Larger factors than the Gaussian baseline so delta is not negligible.
    for (auto& l : model.layers()) {
      if (!l.adapter) continue;
      for (double& v : l.adapter->a().values()) v *= 20.0;
      for (double& v : l.adapter->b().values()) v *= 20.0;
    }
    x = oracle::gaussian(4, spec.input_dim, 1.0, s + 7);
    labels.clear();
    for (std::size_t i = 0; i < 4; ++i) labels.push_back((s + i) % spec.num_classes);
    Model bare = model;
    bare.detach_adapters();
    if (act != Activation::relu ||
        (min_abs_pre_activation(model, x, WeightMode::adapted) > 1e-3 &&
         min_abs_pre_activation(bare, x, WeightMode::base) > 1e-3)) {
      break;
    }
    ++out.redraws;
    if (attempt > 100) throw std::runtime_error("gradient_check: no kink-free model");
  }

  auto record = [&out](const Tensor2& ad, const Tensor2& fd) {
    out.max_rel_err = std::max(out.max_rel_err, oracle::rel_err(ad, fd, 1e-8));
    ++out.tensors;
  };

  // Base weights, adapters detached.
  Model bare = model;
  bare.detach_adapters();
  {
    Graph g;
    const auto fw = bare.forward(g, x, WeightMode::base_differentiable);
    g.backward(g.softmax_cross_entropy(fw.logits, labels));
    for (const auto& name : bare.layer_names()) {
      const Tensor2 ad = g.grad(fw.weights.at(name));
      const Tensor2 fd = finite_diff_grad(
          [&](const Tensor2& w) {
            Model m = bare;
            m.layer(name).w0 = w;
            return oracle::cross_entropy(m, x, labels);
          },
          bare.layer(name).w0);
      record(ad, fd);
    }
  }
  // Adapter factors.
  {
    Graph g;
    const auto fw = model.forward(g, x, WeightMode::adapted);
    g.backward(g.softmax_cross_entropy(fw.logits, labels));
    for (const auto& name : placement) {
      const LoraAdapter& ad = *model.layer(name).adapter;
      record(g.grad(fw.factor_a.at(name)), finite_diff_grad(
                                               [&](const Tensor2& a) {
                                                 Model m = model;
                                                 m.layer(name).adapter->a() = a;
                                                 return oracle::cross_entropy(m, x, labels);
                                               },
                                               ad.a()));
      record(g.grad(fw.factor_b.at(name)), finite_diff_grad(
                                               [&](const Tensor2& b) {
                                                 Model m = model;
                                                 m.layer(name).adapter->b() = b;
                                                 return oracle::cross_entropy(m, x, labels);
                                               },
                                               ad.b()));
    }
  }
  return out;
}

}  // namespace construct
