// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace abmlora {

/// Dense row-major matrix of doubles. The universal numeric carrier: weights,
/// adapter factors, gradients, activations and batches are all Tensor2.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Throws DimensionError unless data.size() == rows * cols.
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor2 identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Tensor2& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  /// "RxC", used in error messages.
  std::string shape_str() const;

  void fill(double v) noexcept;

  /// Bitwise equality of shape and payload.
  bool operator==(const Tensor2& other) const noexcept = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Dense helpers. All go through the dispatched kernels where it matters and
// throw DimensionError on incompatible shapes.

Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// a * b^T
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
/// a^T * b
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);
Tensor2 transpose(const Tensor2& a);
Tensor2 add(const Tensor2& a, const Tensor2& b);
Tensor2 sub(const Tensor2& a, const Tensor2& b);
Tensor2 scale(const Tensor2& a, double s);
Tensor2 hadamard(const Tensor2& a, const Tensor2& b);
/// y += alpha * x
void axpy_inplace(Tensor2& y, double alpha, const Tensor2& x);

double frobenius_sq(const Tensor2& a);
double frobenius_norm(const Tensor2& a);
/// <a, b>_F = sum a_ij b_ij
double frobenius_inner(const Tensor2& a, const Tensor2& b);
double max_abs(const Tensor2& a);
double max_abs_diff(const Tensor2& a, const Tensor2& b);
/// ||a - b||_F / max(||a||_F, ||b||_F); 0 when both are zero.
double relative_error(const Tensor2& a, const Tensor2& b);
bool all_finite(const Tensor2& a) noexcept;

void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op);

}  // namespace abmlora
