#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "patchlm/tensor.hpp"

namespace patchlm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t step = 0;
};

/// One AdamW update over every tensor named in `grads`.
///
/// Weight decay is decoupled and applied first, w <- w - lr*wd*w, followed by
/// the bias-corrected moment step w <- w - lr * m_hat / (sqrt(v_hat) + eps).
/// Throws NumericError naming the parameter on a non-finite gradient; no
/// tensor is modified in that case.
void adamw_step(std::map<std::string, Tensor*>& params, const std::map<std::string, Tensor>& grads, AdamWState& state,
                double lr, double weight_decay, const AdamWConfig& config = {});

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio);

// Linear warmup from 0 to peak over round(warmup_ratio*total) steps, then
// cosine decay to 0 at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, double peak_lr, double warmup_ratio);

}  // namespace patchlm
