#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "miw/errors.hpp"

namespace miw {

// Dense row-major tensor of 64-bit reals. Rank is dynamic; most of the
// toolkit works with rank 1/2, the convolution stack uses rank 4.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor row(std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // rank-2 accessors (rank-1 tensors are treated as a single row)
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double value);

  // reinterprets the buffer; element count must match
  Tensor reshaped(std::vector<std::size_t> shape) const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && values_ == other.values_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

// GEMM-backed primitives shared by the autodiff engine and the layers.
// All matrices are row-major rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);            // a[m,k] * b[k,n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);         // a^T * b
Tensor matmul_nt(const Tensor& a, const Tensor& b);         // a * b^T
void add_matmul(Tensor& c, const Tensor& a, const Tensor& b);     // c += a*b
void add_matmul_tn(Tensor& c, const Tensor& a, const Tensor& b);  // c += a^T*b
void add_matmul_nt(Tensor& c, const Tensor& a, const Tensor& b);  // c += a*b^T

Tensor transpose(const Tensor& a);

}  // namespace miw
