#include "patchlm/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "patchlm/errors.hpp"

namespace patchlm {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimension of size 0 in " + shape_to_string(shape));
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
  }
}

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data().data(), t.dim(0), t.dim(1)); }
MutMap as_matrix(Tensor& t) { return MutMap(t.data().data(), t.dim(0), t.dim(1)); }

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()) + "^T");
  }
  Tensor out({a.dim(0), b.dim(0)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: inner dimensions disagree: " + shape_to_string(a.shape()) + "^T x " +
                         shape_to_string(b.shape()));
  }
  Tensor out({a.dim(1), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.dim(1), a.dim(0)});
  as_matrix(out) = as_matrix(a).transpose();
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

void add_inplace(Tensor& dst, const Tensor& src, double s) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("add: " + shape_to_string(dst.shape()) + " vs " + shape_to_string(src.shape()));
  }
  auto d = dst.data();
  auto x = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * x[i];
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* row = out.data().data() + r * n;
    double mx = row[0];
    for (std::size_t c = 0; c < n; ++c) {
      if (std::isnan(row[c])) throw NumericError("softmax_rows: NaN in row " + std::to_string(r));
      mx = std::max(mx, row[c]);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (std::size_t c = 0; c < n; ++c) row[c] /= sum;
  }
  return out;
}

}  // namespace kernels
}  // namespace patchlm
