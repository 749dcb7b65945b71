#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchlm/autodiff.hpp"

namespace patchlm {

// Builds a scalar loss from parameter vars placed on a fresh graph.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // 0 checks every coordinate. Otherwise tensors larger than this are checked
  // on a seeded random subset of coordinates plus `directions` random
  // directional derivatives that touch every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::size_t directions = 2;
  std::uint64_t seed = 7;
};

struct TensorGradError {
  std::string name;
  double relative_error = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  bool passed = false;
  std::vector<TensorGradError> per_tensor;
};

// Relative error ||a - b|| / (||a|| + ||b||); 0 when both are below 1e-12.
double relative_error(std::span<const double> a, std::span<const double> b);

/// Compares reverse-mode gradients of `f` against central finite differences
/// (f(x+h) - f(x-h)) / 2h. Throws ContractError if `f` is not scalar.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params,
                           const GradCheckOptions& options = {}, const std::vector<std::string>& names = {});

}  // namespace patchlm
