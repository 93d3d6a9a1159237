#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vib/tensor.hpp"

namespace vib {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates, one slot per parameter tensor.
struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

// One AdamW update with decoupled weight decay:
//   p <- p - lr * wd * p
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
// State slots are created on the first call.
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                AdamWState& state, const AdamWConfig& cfg);

}  // namespace vib
