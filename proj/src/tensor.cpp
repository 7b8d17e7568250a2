// SPDX-License-Identifier: Apache-2.0
#include "abmlora/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "abmlora/errors.hpp"
#include "abmlora/kernels.hpp"

namespace abmlora {

Tensor2::Tensor2(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Tensor2: payload of " + std::to_string(data_.size()) +
                         " values does not fit shape " + shape_str());
  }
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Tensor2::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor2(r, c, std::move(data));
}

Tensor2 Tensor2::identity(std::size_t n) {
  Tensor2 t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::string Tensor2::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Tensor2::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
  }
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
  }
  Tensor2 c(a.rows(), b.cols());
  if (c.empty()) return c;
  if (a.cols() == 0) return c;
  kernels::active().gemm(a.rows(), b.cols(), a.cols(), 1.0, a.data(), b.data(), 0.0, c.data());
  return c;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: cannot multiply " + a.shape_str() + " by transpose of " +
                         b.shape_str());
  }
  return matmul(a, transpose(b));
}

Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: cannot multiply transpose of " + a.shape_str() + " by " +
                         b.shape_str());
  }
  return matmul(transpose(a), b);
}

Tensor2 transpose(const Tensor2& a) {
  Tensor2 t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

Tensor2 add(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "add");
  Tensor2 out = a;
  kernels::active().axpy(out.size(), 1.0, b.data(), out.data());
  return out;
}

Tensor2 sub(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "sub");
  Tensor2 out = a;
  kernels::active().axpy(out.size(), -1.0, b.data(), out.data());
  return out;
}

Tensor2 scale(const Tensor2& a, double s) {
  Tensor2 out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

Tensor2 hadamard(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "hadamard");
  Tensor2 out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return out;
}

void axpy_inplace(Tensor2& y, double alpha, const Tensor2& x) {
  require_same_shape(y, x, "axpy");
  kernels::active().axpy(y.size(), alpha, x.data(), y.data());
}

double frobenius_sq(const Tensor2& a) { return kernels::active().dot(a.data(), a.data(), a.size()); }

double frobenius_norm(const Tensor2& a) { return std::sqrt(frobenius_sq(a)); }

double frobenius_inner(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "frobenius_inner");
  return kernels::active().dot(a.data(), b.data(), a.size());
}

double max_abs(const Tensor2& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

double relative_error(const Tensor2& a, const Tensor2& b) {
  const double denom = std::max(frobenius_norm(a), frobenius_norm(b));
  if (denom == 0.0) return 0.0;
  return frobenius_norm(sub(a, b)) / denom;
}

bool all_finite(const Tensor2& a) noexcept {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace abmlora
