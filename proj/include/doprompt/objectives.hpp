#pragma once

#include <random>
#include <span>
#include <vector>

#include "doprompt/model.hpp"
#include "doprompt/tensor.hpp"

namespace doprompt {

/// Images [B x C x H x W] with class labels and source-domain indices in [0, K).
struct DomainBatch {
  Tensor images;
  std::vector<int> labels;
  std::vector<int> domains;

  std::size_t size() const { return labels.size(); }
};

/// Cross-entropy of phi(f_d(x)) with each sample forwarded with its own
/// domain's prompts, averaged over the batch.
Tensor loss_prompt(const DoPromptModel& model, const DomainBatch& batch,
                   std::mt19937_64* dropout_rng = nullptr);

/// Binary cross-entropy on every combination weight against the one-hot
/// true-domain target: per sample (1/L) sum_j (1/K) [-log w_t^j +
/// sum_{d != t} -log(1 - w_d^j)], batch mean; logs clamped at 1e-7.
Tensor loss_w(const Tensor& weights, std::span<const int> domains);

/// Prompt-free class feature with no graph edge back into the model. Runs in
/// evaluation mode so training and inference feed the adapter identically.
Tensor adapter_input(const DoPromptModel& model, const Tensor& images);

/// Cross-entropy with prompts composed from `weights`.
Tensor loss_adapt_with_weights(const DoPromptModel& model, const DomainBatch& batch,
                               const Tensor& weights, std::mt19937_64* dropout_rng = nullptr);

/// Adapter weights from the stop-gradient prompt-free feature, then
/// loss_adapt_with_weights.
Tensor loss_adapt(const DoPromptModel& model, const DomainBatch& batch,
                  std::mt19937_64* dropout_rng = nullptr);

/// Plain pooled cross-entropy without prompts.
Tensor loss_erm(const DoPromptModel& model, const DomainBatch& batch,
                std::mt19937_64* dropout_rng = nullptr);

struct LossTerms {
  bool prompt = true;
  bool adapt = true;
  bool weights = true;
};

struct LossBreakdown {
  double l_prompt = 0.0;
  double l_w = 0.0;
  double l_adapt = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  Tensor total;
  LossBreakdown parts;
};

/// L_prompt + L_adapt + lambda * L_w over the enabled terms. Disabled terms
/// report 0 and contribute nothing to the graph.
TotalLoss total_loss(const DoPromptModel& model, const DomainBatch& batch, double lambda,
                     const LossTerms& terms = {}, std::mt19937_64* dropout_rng = nullptr);

/// total_loss with the adapter input supplied by the caller (normally
/// adapter_input(model, batch.images)); it is treated as a constant.
TotalLoss total_loss_with_feature(const DoPromptModel& model, const DomainBatch& batch,
                                  const Tensor& adapter_feature, double lambda,
                                  const LossTerms& terms = {},
                                  std::mt19937_64* dropout_rng = nullptr);

}  // namespace doprompt
