// SPDX-License-Identifier: Apache-2.0
#include "abmlora/lora.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "abmlora/errors.hpp"
#include "abmlora/random.hpp"

namespace abmlora {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

LoraAdapter::LoraAdapter(Tensor2 a, Tensor2 b, double alpha, std::uint64_t seed)
    : a_(std::move(a)), b_(std::move(b)), alpha_(alpha), seed_(seed) {
  if (a_.cols() != b_.rows()) {
    throw DimensionError("LoraAdapter: factor shapes " + a_.shape_str() + " and " +
                         b_.shape_str() + " do not share a rank");
  }
  if (rank() == 0 || rank() > std::min(d(), k())) {
    throw ConfigError("LoraAdapter: rank " + std::to_string(rank()) + " outside [1, min(" +
                      std::to_string(d()) + ", " + std::to_string(k()) + ")]");
  }
  if (!(alpha_ > 0.0)) throw ConfigError("LoraAdapter: alpha must be positive");
}

Tensor2 LoraAdapter::delta() const { return scale(matmul(a_, b_), eta()); }

InitScheme InitScheme::parse(std::string_view text) {
  InitScheme s;
  if (text == "kaiming_a_zero_b") {
    s.kind = Kind::kaiming_a_zero_b;
  } else if (text == "orthogonal") {
    s.kind = Kind::orthogonal;
  } else if (text == "gaussian") {
    s.kind = Kind::gaussian;
  } else if (text.starts_with("checkpoint:")) {
    s.kind = Kind::from_checkpoint;
    s.checkpoint = std::string(text.substr(11));
    if (s.checkpoint.empty()) throw ConfigError("init scheme 'checkpoint:' needs a path");
  } else {
    throw ConfigError("unknown init scheme '" + std::string(text) + "'");
  }
  return s;
}

std::string InitScheme::name() const {
  switch (kind) {
    case Kind::kaiming_a_zero_b:
      return "kaiming_a_zero_b";
    case Kind::orthogonal:
      return "orthogonal";
    case Kind::gaussian:
      return "gaussian";
    case Kind::from_checkpoint:
      return "checkpoint:" + checkpoint.string();
  }
  return "unknown";
}

namespace {

Tensor2 orthonormal_columns(std::size_t d, std::size_t r, Rng& rng) {
  const Tensor2 g = random_normal(d, r, 1.0, rng);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(r));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < r; ++j) m(i, j) = g(i, j);
  }
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  const Eigen::MatrixXd q =
      qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d),
                                                    static_cast<Eigen::Index>(r));
  Tensor2 out(d, r);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < r; ++j) out(i, j) = q(i, j);
  }
  return out;
}

}  // namespace

LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t rank, double alpha,
                         const InitScheme& scheme, std::uint64_t seed) {
  if (rank == 0 || rank > std::min(d, k)) {
    throw ConfigError("init_adapter: rank " + std::to_string(rank) + " outside [1, min(" +
                      std::to_string(d) + ", " + std::to_string(k) + ")]");
  }
  if (!(alpha > 0.0)) throw ConfigError("init_adapter: alpha must be positive");
  Rng rng(seed);
  switch (scheme.kind) {
    case InitScheme::Kind::kaiming_a_zero_b:
      return LoraAdapter(random_normal(d, rank, std::sqrt(2.0 / static_cast<double>(d)), rng),
                         Tensor2(rank, k), alpha, seed);
    case InitScheme::Kind::orthogonal:
      return LoraAdapter(orthonormal_columns(d, rank, rng), Tensor2(rank, k), alpha, seed);
    case InitScheme::Kind::gaussian: {
      Tensor2 a = random_normal(d, rank, kGaussianInitStd, rng);
      Tensor2 b = random_normal(rank, k, kGaussianInitStd, rng);
      return LoraAdapter(std::move(a), std::move(b), alpha, seed);
    }
    case InitScheme::Kind::from_checkpoint: {
      const auto entries = load_checkpoint(scheme.checkpoint);
      auto it = scheme.entry.empty()
                    ? entries.begin()
                    : std::find_if(entries.begin(), entries.end(),
                                   [&](const NamedAdapter& e) { return e.layer == scheme.entry; });
      if (it == entries.end()) {
        throw ConfigError("checkpoint " + scheme.checkpoint.string() + " has no adapter '" +
                          scheme.entry + "'");
      }
      const LoraAdapter& src = it->adapter;
      if (src.d() != d || src.k() != k || src.rank() != rank) {
        throw ConfigError("checkpoint adapter '" + it->layer + "' has shape d=" +
                          std::to_string(src.d()) + " k=" + std::to_string(src.k()) +
                          " r=" + std::to_string(src.rank()) + ", expected d=" +
                          std::to_string(d) + " k=" + std::to_string(k) +
                          " r=" + std::to_string(rank));
      }
      if (src.alpha() != alpha) {
        throw ConfigError("checkpoint adapter '" + it->layer + "' has alpha " +
                          std::to_string(src.alpha()) + ", expected " + std::to_string(alpha));
      }
      return src;
    }
  }
  throw ConfigError("init_adapter: unhandled scheme");
}

LayerOutput forward(const FrozenLinear& layer, const Tensor2& x) {
  if (x.cols() != layer.in_dim()) {
    throw DimensionError("layer '" + layer.name + "': input " + x.shape_str() +
                         " does not match weight " + layer.w0.shape_str());
  }
  LayerOutput out;
  out.z = matmul_nt(x, merge(layer));
  out.h = activate(out.z, layer.act);
  return out;
}

Tensor2 merge(const FrozenLinear& layer) {
  if (!layer.adapter) return layer.w0;
  return add(layer.w0, layer.adapter->delta());
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[8] = {'A', 'B', 'M', 'L', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw DataError("checkpoint " + path.string() + " is truncated");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void put_tensor(std::ostream& os, const Tensor2& t) {
  for (double v : t.values()) put(os, v);
}

Tensor2 get_tensor(std::istream& is, std::size_t rows, std::size_t cols,
                   const std::filesystem::path& path) {
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = get<double>(is, path);
  return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedAdapter> adapters) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(adapters.size()));
  for (const auto& [layer, ad] : adapters) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(layer.size()));
    os.write(layer.data(), static_cast<std::streamsize>(layer.size()));
    put<std::uint64_t>(os, ad.d());
    put<std::uint64_t>(os, ad.k());
    put<std::uint64_t>(os, ad.rank());
    put<double>(os, ad.alpha());
    put<std::uint64_t>(os, ad.seed());
    put_tensor(os, ad.a());
    put_tensor(os, ad.b());
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

std::vector<NamedAdapter> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + " is not an adapter checkpoint");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint " + path.string() + " has unsupported version " +
                    std::to_string(version));
  }
  const auto count = get<std::uint32_t>(is, path);
  std::vector<NamedAdapter> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, path);
    if (name_len > 4096) throw DataError("checkpoint " + path.string() + " has a corrupt name");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw DataError("checkpoint " + path.string() + " is truncated");
    }
    const auto d = get<std::uint64_t>(is, path);
    const auto k = get<std::uint64_t>(is, path);
    const auto r = get<std::uint64_t>(is, path);
    if (d > (1u << 20) || k > (1u << 20) || r > (1u << 20)) {
      throw DataError("checkpoint " + path.string() + " has implausible shapes");
    }
    const auto alpha = get<double>(is, path);
    const auto seed = get<std::uint64_t>(is, path);
    Tensor2 a = get_tensor(is, d, r, path);
    Tensor2 b = get_tensor(is, r, k, path);
    out.push_back({std::move(name), LoraAdapter(std::move(a), std::move(b), alpha, seed)});
  }
  return out;
}

}  // namespace abmlora
