#include "doprompt/vit.hpp"

#include <cmath>
#include <string>

#include "doprompt/errors.hpp"
#include "doprompt/ops.hpp"

namespace doprompt {

namespace {
constexpr double kTokenInitStd = 0.02;

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor({fan_in, fan_out}, bound, rng);
}
}  // namespace

void ViTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("vit config: " + msg); };
  if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 || depth == 0 ||
      num_heads == 0 || mlp_ratio == 0 || num_classes == 0) {
    fail("all sizes must be positive");
  }
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
         std::to_string(num_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad) {
  std::vector<Real> values(shape_numel(shape));
  for (Real& v : values) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<Real>((2.0 * u - 1.0) * bound);
  }
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<Real> values(shape_numel(shape));
  for (Real& v : values) v = static_cast<Real>(dist(rng));
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

ViTParams ViTParams::init(const ViTConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t d = config.embed_dim, hidden = d * config.mlp_ratio;
  ViTParams p;
  p.patch_weight = normal_tensor({config.patch_dim(), d},
                                 1.0 / std::sqrt(static_cast<double>(config.patch_dim())), rng);
  p.patch_bias = Tensor::zeros({d}, true);
  p.cls = normal_tensor({d}, kTokenInitStd, rng);
  p.pos = normal_tensor({1 + config.num_patches(), d}, kTokenInitStd, rng);
  for (std::size_t i = 0; i < config.depth; ++i) {
    BlockParams b;
    b.norm1_gamma = Tensor::full({d}, Real(1), true);
    b.norm1_beta = Tensor::zeros({d}, true);
    b.qkv_weight = xavier_uniform(d, 3 * d, rng);
    b.qkv_bias = Tensor::zeros({3 * d}, true);
    b.proj_weight = xavier_uniform(d, d, rng);
    b.proj_bias = Tensor::zeros({d}, true);
    b.norm2_gamma = Tensor::full({d}, Real(1), true);
    b.norm2_beta = Tensor::zeros({d}, true);
    b.fc1_weight = xavier_uniform(d, hidden, rng);
    b.fc1_bias = Tensor::zeros({hidden}, true);
    b.fc2_weight = xavier_uniform(hidden, d, rng);
    b.fc2_bias = Tensor::zeros({d}, true);
    p.blocks.push_back(std::move(b));
  }
  p.norm_gamma = Tensor::full({d}, Real(1), true);
  p.norm_beta = Tensor::zeros({d}, true);
  p.head_weight = xavier_uniform(d, config.num_classes, rng);
  p.head_bias = Tensor::zeros({config.num_classes}, true);
  return p;
}

std::vector<NamedTensor> ViTParams::named() const {
  std::vector<NamedTensor> out{
      {"vit.patch.weight", patch_weight},
      {"vit.patch.bias", patch_bias},
      {"vit.cls", cls},
      {"vit.pos", pos},
  };
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockParams& b = blocks[i];
    const std::string prefix = "vit.block" + std::to_string(i) + ".";
    out.push_back({prefix + "norm1.gamma", b.norm1_gamma});
    out.push_back({prefix + "norm1.beta", b.norm1_beta});
    out.push_back({prefix + "attn.qkv.weight", b.qkv_weight});
    out.push_back({prefix + "attn.qkv.bias", b.qkv_bias});
    out.push_back({prefix + "attn.proj.weight", b.proj_weight});
    out.push_back({prefix + "attn.proj.bias", b.proj_bias});
    out.push_back({prefix + "norm2.gamma", b.norm2_gamma});
    out.push_back({prefix + "norm2.beta", b.norm2_beta});
    out.push_back({prefix + "mlp.fc1.weight", b.fc1_weight});
    out.push_back({prefix + "mlp.fc1.bias", b.fc1_bias});
    out.push_back({prefix + "mlp.fc2.weight", b.fc2_weight});
    out.push_back({prefix + "mlp.fc2.bias", b.fc2_bias});
  }
  out.push_back({"vit.norm.gamma", norm_gamma});
  out.push_back({"vit.norm.beta", norm_beta});
  out.push_back({"classifier.weight", head_weight});
  out.push_back({"classifier.bias", head_bias});
  return out;
}

std::vector<Tensor> ViTParams::featurizer_tensors() const {
  std::vector<Tensor> out;
  for (const NamedTensor& nt : named()) {
    if (nt.name.starts_with("vit.")) out.push_back(nt.tensor);
  }
  return out;
}

std::vector<Tensor> ViTParams::classifier_tensors() const { return {head_weight, head_bias}; }

Tensor patch_embed(const ViTConfig& config, const ViTParams& params, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != config.channels ||
      images.dim(2) != config.image_size || images.dim(3) != config.image_size) {
    throw ShapeError("patch_embed: expected [B x " + std::to_string(config.channels) + " x " +
                     std::to_string(config.image_size) + " x " +
                     std::to_string(config.image_size) + "], got " +
                     shape_string(images.shape()));
  }
  return linear(patchify(images, config.patch_size), params.patch_weight, params.patch_bias);
}

Tensor attention_block(const ViTConfig& config, const BlockParams& block, const Tensor& x,
                       std::mt19937_64* dropout_rng) {
  const Real rate = static_cast<Real>(config.dropout);
  Tensor h = layer_norm(x, block.norm1_gamma, block.norm1_beta);
  h = linear(h, block.qkv_weight, block.qkv_bias);
  h = multi_head_attention(h, config.num_heads);
  h = linear(h, block.proj_weight, block.proj_bias);
  if (dropout_rng) h = dropout(h, rate, *dropout_rng);
  Tensor y = add(x, h);

  h = layer_norm(y, block.norm2_gamma, block.norm2_beta);
  h = gelu(linear(h, block.fc1_weight, block.fc1_bias));
  h = linear(h, block.fc2_weight, block.fc2_bias);
  if (dropout_rng) h = dropout(h, rate, *dropout_rng);
  return add(y, h);
}

Tensor embed_tokens(const ViTConfig& config, const ViTParams& params, const Tensor& images,
                    const Tensor& prompts) {
  const Tensor patches = patch_embed(config, params, images);
  const std::size_t batch = images.dim(0), d = config.embed_dim;
  const Tensor cls = repeat_leading(reshape(params.cls, {1, d}), batch);
  const Tensor seq[] = {cls, patches};
  Tensor x = broadcast_add(concat(seq, 1), params.pos);
  if (prompts.defined()) {
    if (prompts.rank() != 3 || prompts.dim(0) != batch || prompts.dim(2) != d) {
      throw ShapeError("vit_forward: prompts " + shape_string(prompts.shape()) +
                       " incompatible with batch " + std::to_string(batch) + " and dim " +
                       std::to_string(d));
    }
    const Tensor with_prompts[] = {x, prompts};
    x = concat(with_prompts, 1);
  }
  return x;
}

ViTOutput vit_forward(const ViTConfig& config, const ViTParams& params, const Tensor& images,
                      const Tensor& prompts, std::mt19937_64* dropout_rng) {
  Tensor x = embed_tokens(config, params, images, prompts);
  for (const BlockParams& block : params.blocks) x = attention_block(config, block, x, dropout_rng);
  const std::size_t batch = images.dim(0), d = config.embed_dim;
  // Layer norm is per token, so normalizing only [CLS] is exact.
  Tensor cls = reshape(slice(x, 1, 0, 1), {batch, d});
  cls = layer_norm(cls, params.norm_gamma, params.norm_beta);
  Tensor logits = linear(cls, params.head_weight, params.head_bias);
  return {cls, logits};
}

}  // namespace doprompt
