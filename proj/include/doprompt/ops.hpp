#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "doprompt/tensor.hpp"

// Differentiable operations over Tensor. Every op records a graph node when
// grad mode is enabled and at least one input requires grad.
namespace doprompt {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);

/// Sum (or mean) of all elements, as a scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

/// [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Affine map over the last axis: x[..., in] * w[in x out] + b[out].
/// `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x + y where y's shape equals the trailing dimensions of x.
Tensor broadcast_add(const Tensor& x, const Tensor& y);

/// Stacks `count` copies of x along a new leading axis.
Tensor repeat_leading(const Tensor& x, std::size_t count);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// Rows of x (along axis 0) in the order given by `indices`.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes the last axis with the biased variance, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = Real(1e-5));

/// Exact x * Phi(x).
Tensor gelu(const Tensor& x);

/// Inverted dropout. Draws one 64-bit word per element from `rng`.
Tensor dropout(const Tensor& x, Real rate, std::mt19937_64& rng);

/// Full (unmasked) multi-head scaled dot-product attention. `qkv` is
/// [B x T x 3D] laid out per token as [q | k | v]; result is [B x T x D].
Tensor multi_head_attention(const Tensor& qkv, std::size_t num_heads);

/// Attention probabilities [B x H x T x T] for the same layout; not recorded.
Tensor attention_probabilities(const Tensor& qkv, std::size_t num_heads);

/// [B x C x H x W] -> [B x k x (C*p*p)], patches in raster order, each
/// flattened channel-major.
Tensor patchify(const Tensor& images, std::size_t patch);

/// Mean over the batch of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Mean over all elements of the binary cross-entropy between `probs` and
/// 0/1 `targets`, with every log argument clamped below at `eps`.
Tensor binary_cross_entropy(const Tensor& probs, std::span<const Real> targets,
                            Real eps = Real(1e-7));

/// out[b, j, :] = sum_d weights[b, j, d] * bank[d, j, :]
/// bank is [K x L x D], weights [B x L x K].
Tensor mix_prompts(const Tensor& bank, const Tensor& weights);

}  // namespace doprompt
