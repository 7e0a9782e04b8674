#include "doprompt/prompting.hpp"

#include <cmath>
#include <string>

#include "doprompt/errors.hpp"
#include "doprompt/ops.hpp"
#include "doprompt/vit.hpp"

namespace doprompt {

namespace {
void check_domain(const PromptBank& bank, long long domain) {
  if (domain < 0 || static_cast<std::size_t>(domain) >= bank.num_domains()) {
    throw IndexError("prompts: domain " + std::to_string(domain) + " outside [0, " +
                     std::to_string(bank.num_domains()) + ")");
  }
}
}  // namespace

PromptBank PromptBank::init(std::size_t num_domains, std::size_t length, std::size_t dim,
                            std::size_t patch_dim, std::mt19937_64& rng) {
  if (num_domains == 0 || length == 0 || dim == 0) {
    throw ContractError("PromptBank: sizes must be positive");
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(patch_dim + dim));
  return {uniform_tensor({num_domains, length, dim}, bound, rng)};
}

Tensor domain_prompts(const PromptBank& bank, std::size_t domain) {
  check_domain(bank, static_cast<long long>(domain));
  return reshape(slice(bank.tokens, 0, domain, 1), {bank.length(), bank.dim()});
}

Tensor prompts_for_domains(const PromptBank& bank, std::span<const int> domains) {
  std::vector<std::size_t> rows;
  rows.reserve(domains.size());
  for (int d : domains) {
    check_domain(bank, d);
    rows.push_back(static_cast<std::size_t>(d));
  }
  return gather_rows(bank.tokens, rows);
}

Tensor repeat_domain_prompts(const PromptBank& bank, std::size_t domain, std::size_t batch) {
  check_domain(bank, static_cast<long long>(domain));
  const std::vector<std::size_t> rows(batch, domain);
  return gather_rows(bank.tokens, rows);
}

AdapterParams AdapterParams::init(std::size_t dim, std::size_t hidden, std::size_t num_domains,
                                  std::size_t length, std::mt19937_64& rng) {
  if (dim == 0 || hidden == 0 || num_domains == 0 || length == 0) {
    throw ContractError("AdapterParams: sizes must be positive");
  }
  AdapterParams a;
  // Both layers U(+-1/sqrt(fan_in)), weights and biases alike.
  const double b1 = 1.0 / std::sqrt(static_cast<double>(dim));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  a.hidden_weight = uniform_tensor({dim, hidden}, b1, rng);
  a.hidden_bias = uniform_tensor({hidden}, b1, rng);
  a.out_weight = uniform_tensor({hidden, length * num_domains}, b2, rng);
  a.out_bias = uniform_tensor({length * num_domains}, b2, rng);
  a.num_domains = num_domains;
  a.length = length;
  return a;
}

std::vector<NamedTensor> AdapterParams::named() const {
  return {{"adapter.l1.weight", hidden_weight},
          {"adapter.l1.bias", hidden_bias},
          {"adapter.l2.weight", out_weight},
          {"adapter.l2.bias", out_bias}};
}

std::vector<Tensor> AdapterParams::tensors() const {
  return {hidden_weight, hidden_bias, out_weight, out_bias};
}

Tensor adapter_forward(const AdapterParams& adapter, const Tensor& feature) {
  if (feature.rank() != 2 || feature.dim(1) != adapter.hidden_weight.dim(0)) {
    throw ShapeError("adapter_forward: feature " + shape_string(feature.shape()) +
                     " does not match adapter input " +
                     shape_string(adapter.hidden_weight.shape()));
  }
  Tensor h = gelu(linear(feature, adapter.hidden_weight, adapter.hidden_bias));
  Tensor scores = linear(h, adapter.out_weight, adapter.out_bias);
  scores = reshape(scores, {feature.dim(0), adapter.length, adapter.num_domains});
  return softmax(scores, 2);
}

Tensor compose_adapted_prompts(const PromptBank& bank, const Tensor& weights) {
  if (weights.rank() != 3 || weights.dim(2) != bank.num_domains() ||
      weights.dim(1) != bank.length()) {
    throw ShapeError("compose_adapted_prompts: weights " + shape_string(weights.shape()) +
                     " do not match bank " + shape_string(bank.tokens.shape()));
  }
  return mix_prompts(bank.tokens, weights);
}

}  // namespace doprompt
