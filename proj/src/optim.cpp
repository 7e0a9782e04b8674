#include "doprompt/optim.hpp"

#include <cmath>
#include <string>

#include "doprompt/errors.hpp"

namespace doprompt {

AdamWState adamw_init(std::span<const Tensor> params) {
  AdamWState state;
  for (const Tensor& p : params) {
    state.first.emplace_back(p.numel(), Real(0));
    state.second.emplace_back(p.numel(), Real(0));
  }
  return state;
}

void adamw_step(std::span<Tensor> params, AdamWState& state, const AdamWHyper& hyper) {
  if (state.first.size() != params.size() || state.second.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state tracks " + std::to_string(state.first.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first[i].size() != params[i].numel() || state.second[i].size() != params[i].numel()) {
      throw ContractError("adamw_step: moment shape mismatch for parameter " + std::to_string(i) +
                          " " + shape_string(params[i].shape()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  const double decay = 1.0 - hyper.lr * hyper.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto values = p.mutable_values();
    const bool has_grad = p.has_grad();
    const std::span<const Real> grad = has_grad ? p.grad() : std::span<const Real>{};
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = has_grad ? static_cast<double>(grad[k]) : 0.0;
      double w = static_cast<double>(values[k]) * decay;
      const double mk = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g;
      const double vk = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      w -= hyper.lr * (mk / bc1) / (std::sqrt(vk / bc2) + hyper.eps);
      values[k] = static_cast<Real>(w);
    }
  }
}

}  // namespace doprompt
