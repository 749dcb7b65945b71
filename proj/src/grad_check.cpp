#include "patchlm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "patchlm/errors.hpp"

namespace patchlm {
namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.constant(p));
  Var out = f(g, vars);
  if (out.value().size() != 1) {
    throw ContractError("grad_check: function must return a scalar, got " + shape_to_string(out.shape()));
  }
  return out.value().item();
}

}  // namespace

double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  diff = std::sqrt(diff);
  const double denom = std::sqrt(na) + std::sqrt(nb);
  if (denom < 1e-12) return 0.0;
  return diff / denom;
}

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params, const GradCheckOptions& options,
                           const std::vector<std::string>& names) {
  if (options.step <= 0.0) throw ContractError("grad_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(g.parameter(p));
    Var out = f(g, vars);
    if (out.value().size() != 1) {
      throw ContractError("grad_check: function must return a scalar, got " + shape_to_string(out.shape()));
    }
    g.backward(out);
    for (Var v : vars) analytic.push_back(g.grad(v));
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  std::vector<Tensor> work = params;
  const double h = options.step;

  for (std::size_t t = 0; t < params.size(); ++t) {
    TensorGradError entry;
    entry.name = t < names.size() ? names[t] : "param" + std::to_string(t);
    const std::size_t n = params[t].size();

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    const bool sampled = options.max_coords_per_tensor != 0 && n > options.max_coords_per_tensor;
    if (sampled) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }

    std::vector<double> numeric, reverse;
    for (std::size_t i : coords) {
      const double orig = work[t][i];
      work[t][i] = orig + h;
      const double up = evaluate(f, work);
      work[t][i] = orig - h;
      const double down = evaluate(f, work);
      work[t][i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
      reverse.push_back(analytic[t][i]);
    }

    if (sampled) {
      std::normal_distribution<double> dist(0.0, 1.0);
      for (std::size_t d = 0; d < options.directions; ++d) {
        std::vector<double> u(n);
        double norm = 0.0;
        for (auto& x : u) {
          x = dist(rng);
          norm += x * x;
        }
        norm = std::sqrt(norm);
        double projected = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          u[i] /= norm;
          projected += u[i] * analytic[t][i];
        }
        for (std::size_t i = 0; i < n; ++i) work[t][i] = params[t][i] + h * u[i];
        const double up = evaluate(f, work);
        for (std::size_t i = 0; i < n; ++i) work[t][i] = params[t][i] - h * u[i];
        const double down = evaluate(f, work);
        work[t] = params[t];
        numeric.push_back((up - down) / (2.0 * h));
        reverse.push_back(projected);
      }
    }

    entry.coords_checked = coords.size();
    entry.relative_error = relative_error(reverse, numeric);
    if (entry.relative_error >= report.max_relative_error) {
      report.max_relative_error = entry.relative_error;
      report.worst_tensor = entry.name;
    }
    report.per_tensor.push_back(std::move(entry));
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace patchlm
