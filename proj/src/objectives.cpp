#include "doprompt/objectives.hpp"

#include <string>

#include "doprompt/errors.hpp"
#include "doprompt/ops.hpp"

namespace doprompt {

namespace {

void check_batch(const DoPromptModel& model, const DomainBatch& batch) {
  if (batch.size() == 0 || batch.domains.size() != batch.size() ||
      !batch.images.defined() || batch.images.dim(0) != batch.size()) {
    throw ShapeError("batch: images, labels and domains disagree in size");
  }
  for (int d : batch.domains) {
    if (d < 0 || static_cast<std::size_t>(d) >= model.num_domains()) {
      throw IndexError("batch: domain index " + std::to_string(d) + " outside [0, " +
                       std::to_string(model.num_domains()) + ")");
    }
  }
}

}  // namespace

Tensor loss_prompt(const DoPromptModel& model, const DomainBatch& batch,
                   std::mt19937_64* dropout_rng) {
  check_batch(model, batch);
  const Tensor prompts = prompts_for_domains(model.prompts, batch.domains);
  const ViTOutput out = vit_forward(model.config, model.vit, batch.images, prompts, dropout_rng);
  return cross_entropy(out.logits, batch.labels);
}

Tensor loss_w(const Tensor& weights, std::span<const int> domains) {
  if (weights.rank() != 3 || weights.dim(0) != domains.size()) {
    throw ShapeError("loss_w: weights " + shape_string(weights.shape()) + " for " +
                     std::to_string(domains.size()) + " samples");
  }
  const std::size_t b = weights.dim(0), l = weights.dim(1), k = weights.dim(2);
  std::vector<Real> targets(b * l * k, Real(0));
  for (std::size_t n = 0; n < b; ++n) {
    if (domains[n] < 0 || static_cast<std::size_t>(domains[n]) >= k) {
      throw IndexError("loss_w: domain " + std::to_string(domains[n]) + " outside [0, " +
                       std::to_string(k) + ")");
    }
    for (std::size_t j = 0; j < l; ++j) targets[(n * l + j) * k + domains[n]] = Real(1);
  }
  // Mean over all B*L*K entries is exactly the (1/B)(1/L)(1/K) normalization.
  return binary_cross_entropy(weights, targets, Real(1e-7));
}

Tensor adapter_input(const DoPromptModel& model, const Tensor& images) {
  NoGradGuard no_grad;
  return vit_forward(model.config, model.vit, images, Tensor()).cls_feature.detach();
}

Tensor loss_adapt_with_weights(const DoPromptModel& model, const DomainBatch& batch,
                               const Tensor& weights, std::mt19937_64* dropout_rng) {
  check_batch(model, batch);
  const Tensor prompts = compose_adapted_prompts(model.prompts, weights);
  const ViTOutput out = vit_forward(model.config, model.vit, batch.images, prompts, dropout_rng);
  return cross_entropy(out.logits, batch.labels);
}

Tensor loss_adapt(const DoPromptModel& model, const DomainBatch& batch,
                  std::mt19937_64* dropout_rng) {
  check_batch(model, batch);
  const Tensor weights = adapter_forward(model.adapter, adapter_input(model, batch.images));
  return loss_adapt_with_weights(model, batch, weights, dropout_rng);
}

Tensor loss_erm(const DoPromptModel& model, const DomainBatch& batch,
                std::mt19937_64* dropout_rng) {
  if (batch.size() == 0 || batch.images.dim(0) != batch.size()) {
    throw ShapeError("batch: images and labels disagree in size");
  }
  const ViTOutput out = vit_forward(model.config, model.vit, batch.images, Tensor(), dropout_rng);
  return cross_entropy(out.logits, batch.labels);
}

TotalLoss total_loss(const DoPromptModel& model, const DomainBatch& batch, double lambda,
                     const LossTerms& terms, std::mt19937_64* dropout_rng) {
  check_batch(model, batch);
  const Tensor feature =
      terms.adapt || terms.weights ? adapter_input(model, batch.images) : Tensor();
  return total_loss_with_feature(model, batch, feature, lambda, terms, dropout_rng);
}

TotalLoss total_loss_with_feature(const DoPromptModel& model, const DomainBatch& batch,
                                  const Tensor& adapter_feature, double lambda,
                                  const LossTerms& terms, std::mt19937_64* dropout_rng) {
  if (!(lambda >= 0.0)) throw ContractError("total_loss: lambda must be non-negative");
  check_batch(model, batch);
  TotalLoss result;
  result.parts.lambda = lambda;
  std::vector<Tensor> pieces;

  if (terms.prompt) {
    Tensor lp = loss_prompt(model, batch, dropout_rng);
    result.parts.l_prompt = lp.item();
    pieces.push_back(lp);
  }
  if (terms.adapt || terms.weights) {
    const Tensor weights = adapter_forward(model.adapter, adapter_feature.detach());
    if (terms.adapt) {
      Tensor la = loss_adapt_with_weights(model, batch, weights, dropout_rng);
      result.parts.l_adapt = la.item();
      pieces.push_back(la);
    }
    if (terms.weights) {
      Tensor lw = loss_w(weights, batch.domains);
      result.parts.l_w = lw.item();
      if (lambda > 0.0) pieces.push_back(scale(lw, static_cast<Real>(lambda)));
    }
  }
  if (pieces.empty()) throw ContractError("total_loss: no loss term enabled");
  Tensor total = pieces[0];
  for (std::size_t i = 1; i < pieces.size(); ++i) total = add(total, pieces[i]);
  result.parts.total = total.item();
  result.total = total;
  return result;
}

}  // namespace doprompt
