#include "doctest.h"

#include <cmath>
#include <numbers>

#include "abmlora/errors.hpp"
#include "abmlora/optim.hpp"
#include "abmlora/tasks.hpp"
#include "abmlora/trainer.hpp"
#include "support/oracles.hpp"

using namespace abmlora;

TEST_CASE("warmup then cosine decay") {
  TrainConfig cfg;
  cfg.learning_rate = 2.0;
  cfg.warmup_ratio = 0.1;
  const std::size_t total = 100;
  CHECK(lr_at(0, cfg, total) == 0.0);
  CHECK(lr_at(5, cfg, total) == doctest::Approx(1.0));
  CHECK(lr_at(10, cfg, total) == doctest::Approx(2.0));
  for (std::size_t s = 10; s < total; s += 7) {
    const double p = (s - 10) / 90.0;
    CHECK(lr_at(s, cfg, total) == doctest::Approx(1.0 * (1 + std::cos(std::numbers::pi * p))));
  }
  cfg.schedule = Schedule::constant;
  CHECK(lr_at(50, cfg, total) == 2.0);
  cfg.warmup_ratio = 0.0;
  CHECK(lr_at(0, cfg, total) == 2.0);
}

TEST_CASE("step counting") {
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 3;
  CHECK(total_steps(cfg, 100) == 12);
  cfg.max_steps = 5;
  CHECK(total_steps(cfg, 100) == 5);
}

TEST_CASE("probe schedule") {
  ProbeSchedule p;
  p.enabled = true;
  p.dense_steps = 3;
  p.every = 5;
  std::vector<std::size_t> due;
  for (std::size_t s = 0; s < 16; ++s)
    if (p.due(s)) due.push_back(s);
  CHECK(due == std::vector<std::size_t>{0, 1, 2, 5, 10, 15});
  p.enabled = false;
  CHECK_FALSE(p.due(0));
}

TEST_CASE("adamw against a hand-rolled update") {
  Tensor2 p = Tensor2::from_rows({{1.0, -2.0}});
  const Tensor2 g1 = Tensor2::from_rows({{0.5, 0.1}});
  const Tensor2 g2 = Tensor2::from_rows({{-0.2, 0.3}});
  Optimizer opt(OptimizerKind::adamw, 0.01);
  Tensor2* params[] = {&p};
  const Tensor2* grads1[] = {&g1};
  const Tensor2* grads2[] = {&g2};
  opt.step(params, grads1, 0.1);
  opt.step(params, grads2, 0.1);

  double ref[2] = {1.0, -2.0};
  double m[2] = {0, 0}, v[2] = {0, 0};
  const double gs[2][2] = {{0.5, 0.1}, {-0.2, 0.3}};
  for (int t = 1; t <= 2; ++t) {
    for (int j = 0; j < 2; ++j) {
      ref[j] *= 1 - 0.1 * 0.01;
      m[j] = 0.9 * m[j] + 0.1 * gs[t - 1][j];
      v[j] = 0.999 * v[j] + 0.001 * gs[t - 1][j] * gs[t - 1][j];
      ref[j] -= 0.1 * (m[j] / (1 - std::pow(0.9, t))) / (std::sqrt(v[j] / (1 - std::pow(0.999, t))) + 1e-8);
    }
  }
  CHECK(p(0, 0) == doctest::Approx(ref[0]).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(ref[1]).epsilon(1e-14));
}

TEST_CASE("sgd and clipping") {
  Tensor2 p = Tensor2::from_rows({{1.0, 1.0}});
  Tensor2 g = Tensor2::from_rows({{3.0, 4.0}});
  Tensor2* gs[] = {&g};
  CHECK(clip_grad_norm(gs, 1.0) == doctest::Approx(5.0));
  CHECK(g(0, 0) == doctest::Approx(0.6));
  Optimizer opt(OptimizerKind::sgd);
  Tensor2* ps[] = {&p};
  const Tensor2* cg[] = {&g};
  opt.step(ps, cg, 0.5);
  CHECK(p(0, 1) == doctest::Approx(1.0 - 0.4));
  CHECK_THROWS_AS(parse_optimizer("lion"), ConfigError);
}

namespace {

Scenario small_scenario() {
  ScenarioSpec spec;
  spec.seed = 11;
  spec.pretrain_task.samples = 512;
  spec.finetune_task.samples = 256;
  spec.eval_samples = 128;
  spec.pretrain.epochs = 5;
  return build_scenario(spec);
}

}  // namespace

TEST_CASE("fine-tuning moves only adapter factors and records probes") {
  const Scenario sc = small_scenario();
  Model m = sc.base;
  m.attach_adapters(sc.placement, 4, 8.0, InitScheme{}, 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  ProbeSchedule probe;
  probe.enabled = true;
  std::size_t hooked = 0;
  const auto r = fine_tune(m, sc.finetune_train, &sc.finetune_eval, cfg, probe,
                           [&](const StepRecord&, const Model&) { ++hooked; });
  CHECK(r.trace.size() == total_steps(cfg, sc.finetune_train.size()));
  CHECK(hooked == r.trace.size());
  for (std::size_t i = 0; i < m.layers().size(); ++i) CHECK(m.layers()[i].w0 == sc.base.layers()[i].w0);
  for (const auto& rec : r.trace) {
    CHECK(std::isfinite(rec.train_loss));
    CHECK(rec.info.has_value() == probe.due(rec.step));
    if (rec.info) {
      CHECK(rec.info->total >= 0.0);
      CHECK(rec.info->upper_bound >= 0.0);
    }
  }
  CHECK(r.trace.back().eval_acc.has_value());
  CHECK(r.final_eval_acc == evaluate(m, sc.finetune_eval));
}

TEST_CASE("the first probe sees no boundary mismatch under a zero-B start") {
  // With B0 = 0 the adapted and base weights coincide at step 0, so g equals
  // the adapter-side gradient and nothing is reducible.
  const Scenario sc = small_scenario();
  Model m = sc.base;
  m.attach_adapters(sc.placement, 4, 8.0, InitScheme{}, 2);
  TrainConfig cfg;
  cfg.max_steps = 1;
  ProbeSchedule probe;
  probe.enabled = true;
  const auto r = fine_tune(m, sc.finetune_train, nullptr, cfg, probe);
  REQUIRE(r.trace[0].info);
  CHECK(r.trace[0].info->upper_bound == 0.0);
  CHECK(r.trace[0].info->reducible == 0.0);
}

TEST_CASE("fine-tuning input errors") {
  const Scenario sc = small_scenario();
  Model m = sc.base;
  TrainConfig cfg;
  CHECK_THROWS_AS(fine_tune(m, sc.finetune_train, nullptr, cfg, {}), ConfigError);
  m.attach_adapters(sc.placement, 4, 8.0, InitScheme{}, 2);
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(fine_tune(m, sc.finetune_train, nullptr, cfg, {}), ConfigError);
  CHECK_THROWS_AS(evaluate(m, Dataset{}), DataError);
  CHECK_THROWS_AS(pretrain(m, sc.finetune_train, TrainConfig{}), ConfigError);
  TrainConfig huge;
  huge.learning_rate = 1e6;
  huge.optimizer = OptimizerKind::sgd;
  huge.schedule = Schedule::constant;
  huge.epochs = 5;
  CHECK_THROWS_AS(fine_tune(m, sc.finetune_train, nullptr, huge, {}), NumericalError);
}

TEST_CASE("pretraining reaches high accuracy on its task") {
  const Scenario sc = small_scenario();
  CHECK(sc.pretrain_accuracy > 0.85);
  CHECK(evaluate(sc.base, sc.pretrain_data) == sc.pretrain_accuracy);
}
