#include "patchlm/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "patchlm/errors.hpp"

namespace patchlm {

void adamw_step(std::map<std::string, Tensor*>& params, const std::map<std::string, Tensor>& grads, AdamWState& state,
                double lr, double weight_decay, const AdamWConfig& config) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("adamw: gradient for unknown parameter '" + name + "'");
    if (it->second->shape() != g.shape()) {
      throw DimensionError("adamw: gradient shape " + shape_to_string(g.shape()) + " does not match parameter '" +
                           name + "' " + shape_to_string(it->second->shape()));
    }
    if (!all_finite(g)) throw NumericError("adamw: non-finite gradient for parameter '" + name + "'");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(config.beta1, t);
  const double bias2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& w = *params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, Tensor::zeros(g.shape()));
    auto [vit, v_new] = state.v.try_emplace(name, Tensor::zeros(g.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      w[i] -= lr * weight_decay * w[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw ConfigError("warmup_ratio must be in [0, 1)");
  return static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
}

double lr_at(std::size_t step, std::size_t total_steps, double peak_lr, double warmup_ratio) {
  if (step > total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  const std::size_t warm = warmup_steps(total_steps, warmup_ratio);
  if (step < warm) return peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return peak_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace patchlm
