#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "doprompt/checkpoint.hpp"
#include "doprompt/tensor.hpp"

namespace doprompt {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  double dropout = 0.1;
  std::size_t num_classes = 5;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
};

struct BlockParams {
  Tensor norm1_gamma, norm1_beta;
  Tensor qkv_weight, qkv_bias;
  Tensor proj_weight, proj_bias;
  Tensor norm2_gamma, norm2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

/// Featurizer f (patch projection E, [CLS], positions, blocks, final norm)
/// plus classifier phi. Positions cover [CLS] and the patches only.
struct ViTParams {
  Tensor patch_weight, patch_bias;
  Tensor cls;
  Tensor pos;
  std::vector<BlockParams> blocks;
  Tensor norm_gamma, norm_beta;
  Tensor head_weight, head_bias;

  /// Xavier-uniform linear layers, LeCun-normal patch projection, zero
  /// biases, unit norm gains, N(0, 0.02^2) class token and positions.
  static ViTParams init(const ViTConfig& config, std::mt19937_64& rng);

  /// Names "vit.*" for the featurizer and "classifier.*" for phi.
  std::vector<NamedTensor> named() const;
  std::vector<Tensor> featurizer_tensors() const;
  std::vector<Tensor> classifier_tensors() const;
};

struct ViTOutput {
  Tensor cls_feature;  // [B x D], final class token after the final norm
  Tensor logits;       // [B x C]
};

/// [B x C x H x W] -> [B x k x D].
Tensor patch_embed(const ViTConfig& config, const ViTParams& params, const Tensor& images);

/// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)). Dropout on
/// both residual branches when `dropout_rng` is non-null.
Tensor attention_block(const ViTConfig& config, const BlockParams& block, const Tensor& x,
                       std::mt19937_64* dropout_rng = nullptr);

/// Token sequence [CLS], patches (raster order), then `prompts` ([B x P x D],
/// or undefined for P = 0). Prompts receive no positional embedding.
/// Passing `dropout_rng` selects training mode.
ViTOutput vit_forward(const ViTConfig& config, const ViTParams& params, const Tensor& images,
                      const Tensor& prompts, std::mt19937_64* dropout_rng = nullptr);

/// Token sequence [B x (1+k+P) x D] fed to the first block.
Tensor embed_tokens(const ViTConfig& config, const ViTParams& params, const Tensor& images,
                    const Tensor& prompts);

/// Zero-mean Gaussian fill with the given standard deviation.
Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = true);
/// Uniform fill on [-bound, bound), 53 random bits per value.
Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad = true);

}  // namespace doprompt
