#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "doprompt/tensor.hpp"

namespace doprompt {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// First/second moments, one buffer per parameter, plus the step count used
/// for bias correction.
struct AdamWState {
  std::vector<std::vector<Real>> first;
  std::vector<std::vector<Real>> second;
  std::int64_t step = 0;
};

AdamWState adamw_init(std::span<const Tensor> params);

/// One AdamW update with decoupled weight decay (p -= lr * wd * p, applied
/// separately from the adaptive step). A parameter without a gradient is
/// treated as having a zero gradient.
void adamw_step(std::span<Tensor> params, AdamWState& state, const AdamWHyper& hyper);

}  // namespace doprompt
