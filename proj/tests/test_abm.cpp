#include "doctest.h"

#include <limits>
#include <cmath>

#include "abmlora/abm.hpp"
#include "abmlora/errors.hpp"
#include "abmlora/finite_diff.hpp"
#include "abmlora/graph.hpp"
#include "support/oracles.hpp"

using namespace abmlora;

namespace {

ActivationCapture make_capture(std::vector<Tensor2> zs) {
  ActivationCapture c;
  for (std::size_t i = 0; i < zs.size(); ++i) c.layers.push_back({"l" + std::to_string(i), zs[i]});
  return c;
}

// Direct evaluation of (1/N) sum_i sum_l w_l^2 max(0, m - tau z)^2.
double loss_oracle(const ActivationCapture& z, const MaskSnapshot& tau, double m,
                   const std::vector<double>& w) {
  double total = 0;
  for (std::size_t l = 0; l < z.layers.size(); ++l) {
    const Tensor2& zl = z.layers[l].z;
    const Tensor2& tl = tau.layers[l].z;
    double s = 0;
    for (std::size_t i = 0; i < zl.rows(); ++i)
      for (std::size_t j = 0; j < zl.cols(); ++j) {
        const double t = std::max(0.0, m - tl(i, j) * zl(i, j));
        s += t * t;
      }
    total += w[l] * w[l] * s / static_cast<double>(zl.rows());
  }
  return total;
}

}  // namespace

TEST_CASE("masks use sgn(0) = -1") {
  const auto c = make_capture({Tensor2::from_rows({{-1.0, 0.0, 2.0}})});
  const auto t = masks(c);
  CHECK(t.at("l0") == Tensor2::from_rows({{-1.0, -1.0, 1.0}}));
  const auto shifted = make_capture({Tensor2::from_rows({{1.0, 0.0, 2.0}})});
  CHECK(mismatch_rate(shifted, t) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(t.at("l9"), ConfigError);
}

TEST_CASE("layer weight schemes") {
  CHECK(layer_weights(4, Weighting::uniform) == std::vector<double>{1, 1, 1, 1});
  const auto seq = layer_weights(4, Weighting::sequential);
  const auto quad = layer_weights(4, Weighting::quadratic);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(seq[l] == doctest::Approx((l + 1) / 4.0));
    CHECK(quad[l] == doctest::Approx(((l + 1) / 4.0) * ((l + 1) / 4.0)));
  }
  CHECK_THROWS_AS(layer_weights(0, Weighting::uniform), ConfigError);
  CHECK_THROWS_AS(parse_weighting("cubic"), ConfigError);
}

TEST_CASE("loss and subgradient against direct evaluation and autodiff") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto ref = make_capture({oracle::gaussian(6, 5, 1.0, s), oracle::gaussian(6, 3, 1.0, s + 1)});
    const auto ft = make_capture({oracle::gaussian(6, 5, 1.0, s + 2), oracle::gaussian(6, 3, 1.0, s + 3)});
    const auto tau = masks(ref);
    const auto w = layer_weights(2, Weighting::sequential);
    const double m = 0.5;
    const auto eval = evaluate_abm(ft, tau, m, w);
    CHECK(eval.loss == doctest::Approx(loss_oracle(ft, tau, m, w)).epsilon(1e-13));
    CHECK(eval.layer_loss[0] + eval.layer_loss[1] == doctest::Approx(eval.loss).epsilon(1e-14));
    CHECK(abm_loss(ft, tau, m, w) == eval.loss);

    for (std::size_t l = 0; l < 2; ++l) {
      const Tensor2& z = ft.layers[l].z;
      const Tensor2& t = tau.layers[l].z;
      // Autodiff of w^2/N * sum relu(m - tau z)^2.
      Graph g;
      const Var zv = g.param(z);
      const Var inner = g.add_scalar(g.scale(g.hadamard(g.input(t), zv), -1.0), m);
      const Var out = g.scale(g.sum(g.square(g.activation(inner, Activation::relu))),
                              w[l] * w[l] / static_cast<double>(z.rows()));
      g.backward(out);
      CHECK(oracle::max_rel_diff(eval.grad[l], g.grad(zv)) < 1e-14);

      auto other = ft;
      const Tensor2 fd = finite_diff_grad(
          [&](const Tensor2& zz) {
            other.layers[l].z = zz;
            return abm_loss(other, tau, m, w);
          },
          z, 1e-6);
      for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) {
          const double slack = m - t(i, j) * z(i, j);
          if (slack < 0.0) CHECK(eval.grad[l](i, j) == 0.0);
          if (std::abs(slack) > 1e-3) {
            CHECK(std::abs(eval.grad[l](i, j) - fd(i, j)) <=
                  1e-6 * std::max(std::abs(fd(i, j)), 1e-8) + 1e-12);
          }
        }
    }
  }
}

TEST_CASE("loss shape errors") {
  const auto a = make_capture({Tensor2(2, 3)});
  const auto b = make_capture({Tensor2(2, 4)});
  const std::vector<double> w{1.0};
  CHECK_THROWS_AS(evaluate_abm(a, masks(b), 0.5, w), DimensionError);
  const std::vector<double> w2{1.0, 1.0};
  CHECK_THROWS_AS(evaluate_abm(a, masks(a), 0.5, w2), DimensionError);
}

TEST_CASE("layer selection") {
  const std::vector<std::string> m{"fc0", "fc1", "fc2", "fc3", "fc4"};
  CHECK(LayerSelection::parse("all").resolve(m) == m);
  CHECK(LayerSelection::parse("first_half").resolve(m) == std::vector<std::string>{"fc0", "fc1"});
  CHECK(LayerSelection::parse("last_half").resolve(m) == std::vector<std::string>{"fc3", "fc4"});
  CHECK(LayerSelection::parse("fc3,fc1").resolve(m) == std::vector<std::string>{"fc1", "fc3"});
  const std::vector<std::string> one{"fc0"};
  CHECK(LayerSelection::parse("last_half").resolve(one) == one);
  CHECK_THROWS_AS(LayerSelection::parse("head").resolve(m), ConfigError);
  CHECK_THROWS_AS(LayerSelection::parse("fc0,,fc1"), ConfigError);
}

TEST_CASE("capture rejects identity layers") {
  ModelSpec spec;
  const Model model = Model::random(spec, 1);
  const std::vector<std::string> head{"head"};
  CHECK_THROWS_AS(capture(model, Tensor2(2, 16), CaptureSource::pretrained, head), ConfigError);
  const std::vector<std::string> fc{"fc0", "fc1"};
  const auto c = capture(model, oracle::gaussian(3, 16, 1.0, 1), CaptureSource::pretrained, fc);
  CHECK(c.at("fc1").cols() == 32);
}

TEST_CASE("stage 1 touches only adapter factors and lowers the fixed-batch loss") {
  ModelSpec spec;
  Model model = Model::random(spec, 3);
  model.attach_adapters(model.default_placement(), 4, 8.0, InitScheme::parse("gaussian"), 4);
  Model before = model;
  const Tensor2 pool = oracle::gaussian(200, 16, 1.0, 5);
  AbmConfig cfg;
  cfg.steps = 30;
  cfg.step_size = 1e-4;
  cfg.batch_policy = BatchPolicy::fixed;
  const auto r = run_stage1(model, PretrainedRef{}, pool, cfg, 6);
  REQUIRE(r.trace.size() == 31);
  for (std::size_t t = 1; t < r.trace.size(); ++t) CHECK(r.trace[t].loss <= r.trace[t - 1].loss + 1e-8);
  CHECK(r.trace.back().loss < r.trace.front().loss);
  for (std::size_t i = 0; i < model.layers().size(); ++i) CHECK(model.layers()[i].w0 == before.layers()[i].w0);
  CHECK_FALSE(model.adapters()[0].adapter == before.adapters()[0].adapter);

  // Same seed, same result.
  Model again = before;
  const auto r2 = run_stage1(again, PretrainedRef{}, pool, cfg, 6);
  CHECK(r2.trace.back().loss == r.trace.back().loss);
  CHECK(again.adapters()[1].adapter == model.adapters()[1].adapter);
}

TEST_CASE("stage 1 scope 'matched' leaves other adapters alone") {
  ModelSpec spec;
  Model model = Model::random(spec, 3);
  model.attach_adapters(model.default_placement(), 4, 8.0, InitScheme::parse("gaussian"), 4);
  const auto before = model.adapters();
  AbmConfig cfg;
  cfg.steps = 5;
  cfg.selection = LayerSelection::parse("fc1");
  cfg.scope = AbmScope::matched;
  run_stage1(model, PretrainedRef{}, oracle::gaussian(64, 16, 1.0, 5), cfg, 6);
  const auto after = model.adapters();
  CHECK(after[0].adapter == before[0].adapter);
  CHECK_FALSE(after[1].adapter == before[1].adapter);
}

TEST_CASE("stage 1 input errors") {
  ModelSpec spec;
  Model model = Model::random(spec, 3);
  AbmConfig cfg;
  CHECK_THROWS_AS(run_stage1(model, PretrainedRef{}, Tensor2(4, 16), cfg, 1), ConfigError);
  model.attach_adapters(model.default_placement(), 4, 8.0, InitScheme{}, 4);
  CHECK_THROWS_AS(run_stage1(model, PretrainedRef{}, Tensor2(0, 16), cfg, 1), DataError);
  cfg.margin = 0.0;
  CHECK_THROWS_AS(run_stage1(model, PretrainedRef{}, Tensor2(4, 16), cfg, 1), ConfigError);
  Tensor2 poisoned = oracle::gaussian(64, 16, 1.0, 5);
  poisoned(3, 2) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(run_stage1(model, PretrainedRef{}, poisoned, AbmConfig{}, 1), NumericalError);
}
