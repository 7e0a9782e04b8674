#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "doprompt/checkpoint.hpp"
#include "doprompt/tensor.hpp"

namespace doprompt {

/// Learnable domain tokens, [K x L x D]: L tokens for each of K source domains.
struct PromptBank {
  Tensor tokens;

  /// Uniform on +-sqrt(6 / (patch_dim + dim)), the scale of a patch token.
  static PromptBank init(std::size_t num_domains, std::size_t length, std::size_t dim,
                         std::size_t patch_dim, std::mt19937_64& rng);
  std::size_t num_domains() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t dim() const { return tokens.dim(2); }
};

/// Tokens of domain d as [L x D]; gradients flow back into the bank.
Tensor domain_prompts(const PromptBank& bank, std::size_t domain);

/// Per-sample domain prompts, [B x L x D].
Tensor prompts_for_domains(const PromptBank& bank, std::span<const int> domains);

/// Same domain's prompts for every sample of a batch of `batch`, [B x L x D].
Tensor repeat_domain_prompts(const PromptBank& bank, std::size_t domain, std::size_t batch);

/// Prompt adapter: D -> H -> (L*K), GELU between, softmax over K per position.
struct AdapterParams {
  Tensor hidden_weight, hidden_bias;
  Tensor out_weight, out_bias;
  std::size_t num_domains = 0;
  std::size_t length = 0;

  static AdapterParams init(std::size_t dim, std::size_t hidden, std::size_t num_domains,
                            std::size_t length, std::mt19937_64& rng);
  std::vector<NamedTensor> named() const;
  std::vector<Tensor> tensors() const;
};

/// Combination weights [B x L x K]; every (sample, position) row lies on the
/// K-simplex.
Tensor adapter_forward(const AdapterParams& adapter, const Tensor& feature);

/// Token j of sample b is sum_d w[b, j, d] * bank[d, j]; [B x L x D].
Tensor compose_adapted_prompts(const PromptBank& bank, const Tensor& weights);

}  // namespace doprompt
