#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "doprompt/checkpoint.hpp"
#include "doprompt/prompting.hpp"
#include "doprompt/vit.hpp"

namespace doprompt {

/// Featurizer, classifier, domain prompts and prompt adapter.
struct DoPromptModel {
  ViTConfig config;
  ViTParams vit;
  PromptBank prompts;
  AdapterParams adapter;

  /// Adapter hidden width equals the model dimension.
  static DoPromptModel init(const ViTConfig& config, std::size_t num_domains,
                            std::size_t prompt_length, std::uint64_t seed);

  std::size_t num_domains() const { return prompts.num_domains(); }
  std::size_t prompt_length() const { return prompts.length(); }

  std::vector<NamedTensor> named() const;
  DoPromptModel clone() const;
};

}  // namespace doprompt
