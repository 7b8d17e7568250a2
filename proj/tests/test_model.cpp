#include "doctest.h"

#include "abmlora/errors.hpp"
#include "abmlora/graph.hpp"
#include "abmlora/model.hpp"
#include "support/oracles.hpp"

using namespace abmlora;

TEST_CASE("mlp layout and placement") {
  ModelSpec spec;
  const Model m = Model::random(spec, 1);
  CHECK(m.layer_names() == std::vector<std::string>{"fc0", "fc1", "head"});
  CHECK(m.matchable_layers() == std::vector<std::string>{"fc0", "fc1"});
  CHECK(m.default_placement() == std::vector<std::string>{"fc0", "fc1"});
  CHECK(m.layer("fc1").w0.rows() == 32);
  CHECK(m.layer("head").act == Activation::identity);
  CHECK_THROWS_AS(m.layer("fc9"), ConfigError);
}

TEST_CASE("mlp logits match a hand-written forward") {
  ModelSpec spec;
  spec.hidden = {7};
  spec.input_dim = 4;
  Model m = Model::random(spec, 2);
  const std::vector<std::string> names{"fc0"};
  m.attach_adapters(names, 2, 4.0, InitScheme::parse("gaussian"), 3);
  const Tensor2 x = oracle::gaussian(5, 4, 1.0, 4);
  Tensor2 w = m.layer("fc0").w0;
  const Tensor2 d = m.layer("fc0").adapter->delta();
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) += d(i, j);
  Tensor2 h = oracle::naive_matmul(x, oracle::naive_transpose(w));
  for (double& v : h.values()) v = std::max(v, 0.0);
  const Tensor2 logits = oracle::naive_matmul(h, oracle::naive_transpose(m.layer("head").w0));
  CHECK(oracle::max_rel_diff(m.logits(x), logits) < 1e-13);
  // Base mode ignores the adapter.
  Model bare = m;
  bare.detach_adapters();
  CHECK(m.logits(x, WeightMode::base) == bare.logits(x));
}

TEST_CASE("parameter counts are r (d + k) per adapted layer") {
  ModelSpec spec;
  Model m = Model::random(spec, 1);
  m.attach_adapters(m.default_placement(), 4, 8.0, InitScheme{}, 1);
  CHECK(m.trainable_parameter_count() == 4 * (32 + 16) + 4 * (32 + 32));
  CHECK(m.adapted_full_parameter_count() == 32 * 16 + 32 * 32);
}

TEST_CASE("transformer forward and adapter placement") {
  ModelSpec spec;
  spec.arch = Architecture::transformer;
  spec.input_dim = 8;
  spec.tokens = 4;
  spec.model_dim = 6;
  spec.ff_dim = 10;
  spec.act = Activation::gelu;
  Model m = Model::random(spec, 5);
  CHECK(m.matchable_layers() == std::vector<std::string>{"ffn_in"});
  m.attach_adapters(m.default_placement(), 2, 4.0, InitScheme::parse("gaussian"), 6);
  const Tensor2 x = oracle::gaussian(3, 8, 1.0, 7);
  const Tensor2 z = m.logits(x);
  CHECK(z.rows() == 3);
  CHECK(z.cols() == spec.num_classes);
  Graph g;
  const auto fw = m.forward(g, x, WeightMode::adapted);
  const std::vector<std::size_t> labels{0, 1, 2};
  g.backward(g.softmax_cross_entropy(fw.logits, labels));
  for (const auto& name : m.default_placement()) CHECK(g.has_grad(fw.factor_a.at(name)));
}

TEST_CASE("spec validation") {
  ModelSpec spec;
  spec.hidden = {};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  ModelSpec t;
  t.arch = Architecture::transformer;
  t.input_dim = 10;
  t.tokens = 4;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("mismatched adapters are rejected") {
  ModelSpec spec;
  Model m = Model::random(spec, 1);
  const std::vector<NamedAdapter> bad{{"fc0", init_adapter(16, 32, 2, 1.0, InitScheme{}, 0)}};
  CHECK_THROWS_AS(m.set_adapters(bad), ConfigError);
}
