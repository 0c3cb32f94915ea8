#include "miw/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <string>

namespace miw {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

void check_mm(const Tensor& a, const Tensor& b, std::size_t ak, std::size_t bk,
              const char* what) {
  if (a.rank() > 2 || b.rank() > 2)
    throw ShapeError(std::string(what) + ": operands must be rank <= 2");
  if (ak != bk)
    throw ShapeError(std::string(what) + ": inner dimensions disagree (" +
                     std::to_string(ak) + " vs " + std::to_string(bk) + ")");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), values_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_numel(shape_) != values_.size())
    throw ShapeError("tensor shape does not match value count");
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::row(std::initializer_list<double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() != 2) throw ShapeError("rows(): tensor is not rank 2");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() != 2) throw ShapeError("cols(): tensor is not rank 2");
  return shape_[1];
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  if (shape_numel(shape) != values_.size())
    throw ShapeError("reshape: element count mismatch");
  return Tensor(std::move(shape), values_);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_mm(a, b, a.cols(), b.rows(), "matmul");
  Tensor c({a.rows(), b.cols()});
  Map(c.data(), c.rows(), c.cols()).noalias() =
      CMap(a.data(), a.rows(), a.cols()) * CMap(b.data(), b.rows(), b.cols());
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  check_mm(a, b, a.rows(), b.rows(), "matmul_tn");
  Tensor c({a.cols(), b.cols()});
  Map(c.data(), c.rows(), c.cols()).noalias() =
      CMap(a.data(), a.rows(), a.cols()).transpose() * CMap(b.data(), b.rows(), b.cols());
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_mm(a, b, a.cols(), b.cols(), "matmul_nt");
  Tensor c({a.rows(), b.rows()});
  Map(c.data(), c.rows(), c.cols()).noalias() =
      CMap(a.data(), a.rows(), a.cols()) * CMap(b.data(), b.rows(), b.cols()).transpose();
  return c;
}

void add_matmul(Tensor& c, const Tensor& a, const Tensor& b) {
  check_mm(a, b, a.cols(), b.rows(), "add_matmul");
  Map(c.data(), a.rows(), b.cols()).noalias() +=
      CMap(a.data(), a.rows(), a.cols()) * CMap(b.data(), b.rows(), b.cols());
}

void add_matmul_tn(Tensor& c, const Tensor& a, const Tensor& b) {
  check_mm(a, b, a.rows(), b.rows(), "add_matmul_tn");
  Map(c.data(), a.cols(), b.cols()).noalias() +=
      CMap(a.data(), a.rows(), a.cols()).transpose() * CMap(b.data(), b.rows(), b.cols());
}

void add_matmul_nt(Tensor& c, const Tensor& a, const Tensor& b) {
  check_mm(a, b, a.cols(), b.cols(), "add_matmul_nt");
  Map(c.data(), a.rows(), b.rows()).noalias() +=
      CMap(a.data(), a.rows(), a.cols()) * CMap(b.data(), b.rows(), b.cols()).transpose();
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: tensor is not rank 2");
  Tensor c({a.cols(), a.rows()});
  Map(c.data(), c.rows(), c.cols()).noalias() =
      CMap(a.data(), a.rows(), a.cols()).transpose();
  return c;
}

}  // namespace miw
