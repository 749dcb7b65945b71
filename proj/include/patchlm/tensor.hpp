#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace patchlm {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of doubles. Every dimension is at least 1 and the
/// element count always equals the product of the shape.
class Tensor {
 public:
  Tensor();  // scalar zero, shape {1}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor normal(Shape shape, double stddev, std::mt19937_64& rng);
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  // Treat the tensor as a matrix: rows = product of leading dims, cols = last dim.
  std::size_t rows() const { return size() / cols(); }
  std::size_t cols() const { return shape_.back(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  double item() const;
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// Plain (graph-free) kernels. They check shapes and throw DimensionError.
namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);     // a·b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a·bᵀ
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ·b
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& dst, const Tensor& src, double s = 1.0);
Tensor softmax_rows(const Tensor& x);

}  // namespace kernels
}  // namespace patchlm
