#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "doprompt/checkpoint.hpp"
#include "doprompt/datagen.hpp"
#include "doprompt/model.hpp"
#include "doprompt/objectives.hpp"
#include "doprompt/optim.hpp"

namespace doprompt {

/// Training variants. The order matches the rows of the ablation table.
enum class Variant { doprompt, erm, no_adapter, no_lw, no_ladapt, frozen_backbone };

std::string_view variant_name(Variant variant);
Variant parse_variant(std::string_view name);
const std::vector<Variant>& all_variants();

/// Which prediction rule a model is evaluated with.
enum class InferenceMode { adapted, prompt_free, prompt_averaged };

InferenceMode inference_mode_for(Variant variant);

struct TrainConfig {
  Variant variant = Variant::doprompt;
  int target_domain = 0;
  std::size_t steps = 2000;
  std::size_t batch_per_domain = 16;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double lambda = 1.0;
  std::size_t prompt_length = 4;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;
  std::size_t log_interval = 10;
  double val_fraction = 0.2;
  ViTConfig model;  // dropout lives here
  // Generator settings, used when no dataset file is supplied.
  std::size_t num_domains = 4;
  std::size_t per_domain = 500;

  void validate() const;
};

/// Loss terms, lambda and the parameter groups a training run updates.
struct TrainPlan {
  bool erm = false;  // plain pooled cross-entropy, no prompts
  LossTerms terms;
  double lambda = 1.0;
  bool train_featurizer = true;
  bool train_classifier = true;
  bool train_prompts = true;
  bool train_adapter = true;
};

TrainPlan plan_for(Variant variant, double lambda);

/// Model, the optimizer moments of its trainable tensors, and the plan that
/// decides which tensors those are.
struct ModelState {
  DoPromptModel model;
  TrainPlan plan;
  AdamWState optimizer;

  static ModelState init(const DoPromptModel& model, const TrainPlan& plan);

  std::vector<NamedTensor> trainable_named() const;
  std::vector<Tensor> trainable() const;
  std::int64_t step() const { return optimizer.step; }

  /// Model tensors, "optim.step", and "optim.m.*"/"optim.v.*" moments.
  std::vector<NamedTensor> checkpoint_tensors() const;
  void restore(std::span<const NamedTensor> tensors);
  ModelState clone() const;
};

/// One optimizer step on `batch` (all source domains, equal sub-batches).
/// Throws NumericalError naming the first non-finite loss component.
LossBreakdown train_step(ModelState& state, const DomainBatch& batch, const AdamWHyper& hyper,
                         std::mt19937_64* dropout_rng);

/// Two-pass inference result.
struct Inference {
  Tensor logits;   // [B x C]
  Tensor weights;  // [B x L x K]
};

/// Prompt-free pass -> adapter -> adapted prompts -> second pass. No graph.
Inference infer(const DoPromptModel& model, const Tensor& images);
/// Forward with source domain d's prompts.
Tensor infer_with_domain_prompt(const DoPromptModel& model, const Tensor& images, std::size_t domain);
/// Mean over domains of infer_with_domain_prompt.
Tensor infer_prompt_averaged(const DoPromptModel& model, const Tensor& images);
Tensor infer_prompt_free(const DoPromptModel& model, const Tensor& images);

Tensor predict_logits(const DoPromptModel& model, const Tensor& images, InferenceMode mode);

/// Accuracy in percent of `mode` over the given dataset images, in chunks.
double evaluate_accuracy(const DoPromptModel& model, const SyntheticDataset& data,
                         std::span<const std::size_t> indices, InferenceMode mode);

double accuracy_percent(const Tensor& logits, std::span<const int> labels);

/// Cycles through one domain's training indices, reshuffling every epoch.
class DomainSampler {
 public:
  DomainSampler(std::vector<std::size_t> indices, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t count);

 private:
  std::vector<std::size_t> indices_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

struct DomainSplit {
  std::vector<int> source_domains;  // dataset domain id of each model domain
  std::vector<std::vector<std::size_t>> train;  // per source domain
  std::vector<std::vector<std::size_t>> validation;
  std::vector<std::size_t> test;  // target domain images
};

/// Leave-one-domain-out split; each source domain is shuffled with a seeded
/// stream and its first (1 - val_fraction) share goes to training.
DomainSplit split_domains(const SyntheticDataset& data, int target_domain, double val_fraction,
                          std::uint64_t seed);

struct LossRow {
  std::size_t step;
  LossBreakdown loss;
};

struct SelectionRecord {
  std::vector<std::size_t> steps;
  std::vector<double> val_acc;
  std::size_t chosen_step = 0;
  double chosen_val_acc = 0.0;
};

struct ExperimentResult {
  Variant variant = Variant::doprompt;
  int target_domain = 0;
  std::uint64_t seed = 0;
  SelectionRecord selection;
  double test_acc = 0.0;
  std::vector<LossRow> loss_curve;
  DomainSplit split;
  ModelState best;  // state at the chosen step
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains `config.variant` with `config.target_domain` held out and selects
/// the checkpoint with the best pooled source-validation accuracy (earliest
/// on ties), using the variant's test-time inference rule.
ExperimentResult run_experiment(const SyntheticDataset& data, const TrainConfig& config,
                                const ProgressFn& progress = {});

/// "step,l_prompt,l_w,l_adapt,total" rows.
std::string loss_curve_csv(const std::vector<LossRow>& rows);

}  // namespace doprompt
