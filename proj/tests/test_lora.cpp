#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "abmlora/errors.hpp"
#include "abmlora/lora.hpp"
#include "support/oracles.hpp"

using namespace abmlora;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "abmlora_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("delta is eta * A * B with eta = alpha / r") {
  const Tensor2 a = oracle::gaussian(5, 2, 1.0, 1);
  const Tensor2 b = oracle::gaussian(2, 3, 1.0, 2);
  const LoraAdapter ad(a, b, 6.0);
  CHECK(ad.eta() == 3.0);
  Tensor2 expect = oracle::naive_matmul(a, b);
  for (double& v : expect.values()) v *= 3.0;
  CHECK(oracle::max_rel_diff(ad.delta(), expect) < 1e-14);
  CHECK(ad.trainable_count() == 2 * (5 + 3));
}

TEST_CASE("adapter construction errors") {
  CHECK_THROWS_AS(LoraAdapter(Tensor2(4, 2), Tensor2(3, 4), 1.0), DimensionError);
  CHECK_THROWS_AS(LoraAdapter(Tensor2(2, 3), Tensor2(3, 4), 1.0), ConfigError);
  CHECK_THROWS_AS(LoraAdapter(Tensor2(4, 2), Tensor2(2, 4), 0.0), ConfigError);
  CHECK_THROWS_AS(init_adapter(4, 4, 5, 1.0, InitScheme{}, 0), ConfigError);
}

TEST_CASE("kaiming/zero init") {
  const LoraAdapter ad = init_adapter(400, 30, 8, 16.0, InitScheme{}, 3);
  CHECK(max_abs(ad.b()) == 0.0);
  CHECK(max_abs(ad.delta()) == 0.0);
  double var = 0;
  for (double v : ad.a().values()) var += v * v;
  var /= static_cast<double>(ad.a().size());
  CHECK(var == doctest::Approx(2.0 / 400.0).epsilon(0.1));
  CHECK(ad.eta() == 2.0);
}

TEST_CASE("orthogonal init has orthonormal columns") {
  const LoraAdapter ad = init_adapter(12, 7, 4, 1.0, InitScheme::parse("orthogonal"), 5);
  const Tensor2 gram = oracle::naive_matmul(oracle::naive_transpose(ad.a()), ad.a());
  CHECK(oracle::max_rel_diff(gram, Tensor2::identity(4)) < 1e-12);
  CHECK(max_abs(ad.b()) == 0.0);
}

TEST_CASE("gaussian init") {
  const LoraAdapter ad = init_adapter(300, 300, 8, 1.0, InitScheme::parse("gaussian"), 5);
  double var = 0;
  for (double v : ad.b().values()) var += v * v;
  var /= static_cast<double>(ad.b().size());
  CHECK(std::sqrt(var) == doctest::Approx(kGaussianInitStd).epsilon(0.05));
}

TEST_CASE("init is a pure function of the seed") {
  for (const char* s : {"kaiming_a_zero_b", "orthogonal", "gaussian"}) {
    CAPTURE(s);
    const auto scheme = InitScheme::parse(s);
    CHECK(init_adapter(9, 6, 3, 2.0, scheme, 42) == init_adapter(9, 6, 3, 2.0, scheme, 42));
    CHECK_FALSE(init_adapter(9, 6, 3, 2.0, scheme, 42) == init_adapter(9, 6, 3, 2.0, scheme, 43));
  }
  CHECK_THROWS_AS(InitScheme::parse("pissa"), ConfigError);
  CHECK_THROWS_AS(InitScheme::parse("checkpoint:"), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const std::vector<NamedAdapter> ads{
      {"fc0", init_adapter(8, 5, 2, 4.0, InitScheme::parse("gaussian"), 1)},
      {"fc1", init_adapter(6, 8, 3, 1.5, InitScheme{}, 2)},
  };
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(path, ads);
  const auto back = load_checkpoint(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].layer == ads[i].layer);
    CHECK(back[i].adapter == ads[i].adapter);
  }

  InitScheme from;
  from.kind = InitScheme::Kind::from_checkpoint;
  from.checkpoint = path;
  from.entry = "fc1";
  CHECK(init_adapter(6, 8, 3, 1.5, from, 9).a() == ads[1].adapter.a());
  CHECK_THROWS_AS(init_adapter(6, 8, 2, 1.5, from, 9), ConfigError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  CHECK_THROWS_AS(load_checkpoint(temp_file("missing.ckpt")), DataError);
  const auto foreign = temp_file("foreign.ckpt");
  std::ofstream(foreign) << "not a checkpoint at all";
  CHECK_THROWS_AS(load_checkpoint(foreign), DataError);

  const std::vector<NamedAdapter> ads{{"fc0", init_adapter(8, 5, 2, 4.0, InitScheme{}, 1)}};
  const auto path = temp_file("trunc.ckpt");
  save_checkpoint(path, ads);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("layer forward uses the merged weight") {
  FrozenLinear layer{"fc", oracle::gaussian(4, 3, 1.0, 1), Activation::relu,
                     init_adapter(4, 3, 2, 2.0, InitScheme::parse("gaussian"), 3)};
  const Tensor2 x = oracle::gaussian(5, 3, 1.0, 4);
  const auto out = forward(layer, x);
  Tensor2 merged = layer.w0;
  const Tensor2 d = layer.adapter->delta();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) merged(i, j) += d(i, j);
  const Tensor2 z = oracle::naive_matmul(x, oracle::naive_transpose(merged));
  CHECK(oracle::max_rel_diff(out.z, z) < 1e-13);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) CHECK(out.h(i, j) == std::max(0.0, out.z(i, j)));
  CHECK_THROWS_AS(forward(layer, Tensor2(2, 4)), DimensionError);
}
