#include "doprompt/model.hpp"

#include <random>

namespace doprompt {

DoPromptModel DoPromptModel::init(const ViTConfig& config, std::size_t num_domains,
                                  std::size_t prompt_length, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DoPromptModel m;
  m.config = config;
  m.vit = ViTParams::init(config, rng);
  m.prompts = PromptBank::init(num_domains, prompt_length, config.embed_dim, config.patch_dim(), rng);
  m.adapter = AdapterParams::init(config.embed_dim, config.embed_dim, num_domains, prompt_length, rng);
  return m;
}

std::vector<NamedTensor> DoPromptModel::named() const {
  std::vector<NamedTensor> out = vit.named();
  out.push_back({"prompts.bank", prompts.tokens});
  for (NamedTensor& nt : adapter.named()) out.push_back(std::move(nt));
  return out;
}

DoPromptModel DoPromptModel::clone() const {
  DoPromptModel copy = *this;
  // Rebind every tensor handle to fresh storage.
  auto deep = [](Tensor& t) { t = t.clone(t.requires_grad()); };
  ViTParams& v = copy.vit;
  for (Tensor* t : {&v.patch_weight, &v.patch_bias, &v.cls, &v.pos, &v.norm_gamma, &v.norm_beta,
                    &v.head_weight, &v.head_bias}) {
    deep(*t);
  }
  for (BlockParams& b : v.blocks) {
    for (Tensor* t : {&b.norm1_gamma, &b.norm1_beta, &b.qkv_weight, &b.qkv_bias, &b.proj_weight,
                      &b.proj_bias, &b.norm2_gamma, &b.norm2_beta, &b.fc1_weight, &b.fc1_bias,
                      &b.fc2_weight, &b.fc2_bias}) {
      deep(*t);
    }
  }
  deep(copy.prompts.tokens);
  AdapterParams& a = copy.adapter;
  for (Tensor* t : {&a.hidden_weight, &a.hidden_bias, &a.out_weight, &a.out_bias}) deep(*t);
  return copy;
}

}  // namespace doprompt
