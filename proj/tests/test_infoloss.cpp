#include "doctest.h"

#include <cmath>

#include "abmlora/errors.hpp"
#include "abmlora/infoloss.hpp"
#include "support/construct.hpp"
#include "support/oracles.hpp"

using namespace abmlora;

namespace {

Tensor2 dense_mul3(const Tensor2& a, const Tensor2& b, const Tensor2& c) {
  return oracle::naive_matmul(oracle::naive_matmul(a, b), c);
}

}  // namespace

TEST_CASE("projection matches an independent dense evaluation") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor2 g = oracle::gaussian(9, 7, 1.0, s);
    const Tensor2 a = oracle::gaussian(9, 3, 0.5, s + 100);
    const Tensor2 b = oracle::gaussian(3, 7, 0.5, s + 200);
    CHECK(oracle::max_rel_diff(tangent_projection(g, a, b), oracle::projection(g, a, b)) < 1e-13);
  }
  CHECK_THROWS_AS(tangent_projection(Tensor2(4, 3), Tensor2(4, 2), Tensor2(2, 4)), DimensionError);
}

TEST_CASE("projection fixed points and zeros") {
  const Tensor2 q = oracle::orthonormal(8, 3, 1);
  const Tensor2 g = oracle::naive_matmul(q, oracle::gaussian(3, 5, 1.0, 2));
  CHECK(oracle::max_rel_diff(tangent_projection(g, q, Tensor2(3, 5)), g) < 1e-14);
  CHECK(max_abs(tangent_projection(g, Tensor2(8, 3), Tensor2(3, 5))) == 0.0);
}

TEST_CASE("info loss: captured, discarded and svd oracle") {
  const Tensor2 q = oracle::orthonormal(10, 3, 5);
  const Tensor2 zero_b(3, 6);
  const Tensor2 inside = oracle::naive_matmul(q, oracle::gaussian(3, 6, 1.0, 6));
  CHECK(info_loss(inside, q, zero_b) < 1e-20);

  // Component orthogonal to col(q).
  const Tensor2 outside = oracle::svd_residual(oracle::gaussian(10, 6, 1.0, 7), q);
  CHECK(std::abs(info_loss(outside, q, zero_b) - oracle::naive_frob_sq(outside)) < 1e-12);

  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor2 g = oracle::gaussian(10, 6, 1.0, s + 50);
    const double ref = oracle::naive_frob_sq(oracle::svd_residual(g, q));
    CHECK(std::abs(info_loss(g, q, zero_b) - ref) < 1e-10 * std::max(1.0, ref));
  }
}

TEST_CASE("info loss is invariant to rotating A0 when B0 = 0") {
  const Tensor2 q = oracle::orthonormal(10, 3, 5);
  const Tensor2 rot = oracle::orthonormal(3, 3, 9);
  const Tensor2 g = oracle::gaussian(10, 6, 1.0, 10);
  const Tensor2 zero_b(3, 6);
  CHECK(info_loss(g, oracle::naive_matmul(q, rot), zero_b) ==
        doctest::Approx(info_loss(g, q, zero_b)).epsilon(1e-12));
}

TEST_CASE("first-order update residual equals the quadratic term") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor2 a = oracle::gaussian(6, 2, 1.0, s);
    const Tensor2 b = oracle::gaussian(2, 5, 1.0, s + 1);
    const Tensor2 g = oracle::gaussian(6, 5, 1.0, s + 2);
    const double gamma = 0.01, eta = 2.0;
    // Expanding (A0 - c g B0^T)(B0 - c A0^T g) leaves c^2 g B0^T A0^T g.
    const double closed =
        gamma * eta * gamma * eta *
        std::sqrt(oracle::naive_frob_sq(dense_mul3(oracle::naive_matmul(g, oracle::naive_transpose(b)),
                                                   oracle::naive_transpose(a), g)));
    const double r = first_order_update_check(a, b, g, gamma, eta);
    CHECK(std::abs(r - closed) < 1e-12 * std::max(1.0, closed));
    CHECK(r / first_order_update_check(a, b, g, gamma / 2, eta) == doctest::Approx(4.0).epsilon(2.5e-4));
  }
  const Tensor2 a = oracle::gaussian(6, 2, 1.0, 1);
  const Tensor2 b = oracle::gaussian(2, 5, 1.0, 2);
  const Tensor2 g = oracle::gaussian(6, 5, 1.0, 3);
  CHECK(first_order_update_check(a, b, g, 0.0, 1.0) == 0.0);
  CHECK_THROWS_AS(first_order_update_check(a, b, g, -1.0, 1.0), ConfigError);
}

TEST_CASE("pythagorean decomposition with orthonormal A0 and zero B0") {
  const Tensor2 zero_b(4, 7);
  for (std::uint64_t s = 0; s < 30; ++s) {
    const Tensor2 q = oracle::orthonormal(11, 4, s);
    const Tensor2 g = oracle::gaussian(11, 7, 1.0, s + 1);
    const Tensor2 gd = oracle::gaussian(11, 7, 1.0, s + 2);
    const auto r = decompose(g, gd, q, zero_b);
    CHECK(r.pythagorean_residual < 1e-10 * std::max(1.0, r.total));
    CHECK(r.reducible <= r.upper_bound);
    // Independent evaluation of each field.
    const Tensor2 pg = oracle::projection(g, q, zero_b);
    const Tensor2 pd = oracle::projection(gd, q, zero_b);
    CHECK(r.total == doctest::Approx(oracle::naive_frob_sq(oracle::naive_sub(g, pd))).epsilon(1e-12));
    CHECK(r.unavoidable == doctest::Approx(oracle::naive_frob_sq(oracle::naive_sub(g, pg))).epsilon(1e-12));
    CHECK(r.reducible == doctest::Approx(oracle::naive_frob_sq(oracle::naive_sub(pg, pd))).epsilon(1e-12));
    CHECK(r.upper_bound == doctest::Approx(oracle::naive_frob_sq(oracle::naive_sub(g, gd))).epsilon(1e-12));
    // <g - P g, P h> = 0 in this regime.
    const double inner = frobenius_inner(oracle::naive_sub(g, pg), pd);
    CHECK(std::abs(inner) < 1e-10 * std::sqrt(oracle::naive_frob_sq(g) * oracle::naive_frob_sq(gd)));
  }
}

TEST_CASE("decompose special cases") {
  const Tensor2 q = oracle::orthonormal(6, 2, 1);
  const Tensor2 zero_b(2, 4);
  const Tensor2 g = oracle::gaussian(6, 4, 1.0, 2);
  const auto same = decompose(g, g, q, zero_b);
  CHECK(same.reducible == 0.0);
  CHECK(same.total == same.unavoidable);
  const auto zero = decompose(Tensor2(6, 4), Tensor2(6, 4), q, zero_b);
  CHECK(zero.total == 0.0);
  CHECK(zero.unavoidable == 0.0);
  CHECK(zero.reducible == 0.0);
  CHECK(zero.upper_bound == 0.0);
}

TEST_CASE("decompose throws when the bound fails") {
  // A0 with column norm 3: P scales col(A0) by 9, so reducible = 81 upper_bound.
  Tensor2 a(3, 1);
  a(0, 0) = 3.0;
  const Tensor2 g = Tensor2::from_rows({{1.0}, {0.0}, {0.0}});
  const Tensor2 gd(3, 1);
  const auto r = measure_decomposition(g, gd, a, Tensor2(1, 1));
  CHECK(r.reducible == doctest::Approx(81.0));
  CHECK_FALSE(within_bound(r));
  CHECK_THROWS_AS(decompose(g, gd, a, Tensor2(1, 1)), ConsistencyError);
}

TEST_CASE("gradient difference vanishes without boundary flips") {
  const auto c = construct::make_bridge_case(3, false);
  const Tensor2 diff = grad_diff_nonlinear(c.base, c.adapted, c.x, c.labels, c.layer);
  CHECK(max_abs(diff) < 1e-12);
  CHECK(max_abs(mask_gradient_difference(c.base, c.adapted, c.x, c.labels, c.layer)) == 0.0);
  const auto g = layer_gradients(c.adapted, c.x, c.labels, c.layer);
  const auto r = decompose(g.base, g.adapted, c.a0, c.b0);
  CHECK(r.reducible <= 1e-20);
}

TEST_CASE("one flipped neuron gives a difference on that neuron's row") {
  const auto c = construct::make_bridge_case(3, true);
  REQUIRE(c.flipped_sample);
  const Tensor2 diff = grad_diff_nonlinear(c.base, c.adapted, c.x, c.labels, c.layer);
  CHECK(frobenius_norm(diff) > 0.0);

  // Brute force: sum of per-sample differences equals the batch difference.
  Tensor2 summed(diff.rows(), diff.cols());
  for (std::size_t i = 0; i < c.x.rows(); ++i) {
    Tensor2 xi(1, c.x.cols());
    for (std::size_t j = 0; j < c.x.cols(); ++j) xi(0, j) = c.x(i, j);
    const Tensor2 d = grad_diff_nonlinear(c.base, c.adapted, xi, {c.labels[i]}, c.layer);
    if (i != *c.flipped_sample) {
      // Other samples: the neuron stays off and h is unchanged, so nothing differs.
      CHECK(max_abs(d) < 1e-15);
    }
    axpy_inplace(summed, 1.0 / static_cast<double>(c.x.rows()), d);
  }
  CHECK(oracle::max_rel_diff(summed, diff) < 1e-12);

  // The activation-mask form is rank one, supported on the flipped neuron.
  const Tensor2 mask = mask_gradient_difference(c.base, c.adapted, c.x, c.labels, c.layer);
  for (std::size_t r = 0; r < mask.rows(); ++r)
    for (std::size_t j = 0; j < mask.cols(); ++j)
      if (r != c.neuron) CHECK(mask(r, j) == 0.0);
  double row_norm = 0;
  for (std::size_t j = 0; j < mask.cols(); ++j) row_norm += mask(c.neuron, j) * mask(c.neuron, j);
  CHECK(row_norm > 0.0);
}

TEST_CASE("zero adapter gives an identical gradient") {
  auto c = construct::make_bridge_case(4, false);
  Model zeroed = c.base;
  const std::vector<NamedAdapter> ad{{c.layer, LoraAdapter(c.a0, Tensor2(1, c.b0.cols()), 1.0)}};
  zeroed.set_adapters(ad);
  CHECK(max_abs(grad_diff_nonlinear(c.base, zeroed, c.x, c.labels, c.layer)) == 0.0);
}
