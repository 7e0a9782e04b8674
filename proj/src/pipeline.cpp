#include "doprompt/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "doprompt/errors.hpp"
#include "doprompt/ops.hpp"

namespace doprompt {

namespace {

constexpr std::size_t kEvalChunk = 64;

enum StreamId : std::uint64_t { kModelStream = 1, kDropoutStream, kSplitStream, kSamplerStream };

void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

bool uses_adapter(Variant v) {
  return v == Variant::doprompt || v == Variant::no_lw || v == Variant::no_ladapt ||
         v == Variant::frozen_backbone;
}

}  // namespace

std::string_view variant_name(Variant variant) {
  switch (variant) {
    case Variant::doprompt: return "doprompt";
    case Variant::erm: return "erm";
    case Variant::no_adapter: return "no_adapter";
    case Variant::no_lw: return "no_lw";
    case Variant::no_ladapt: return "no_ladapt";
    case Variant::frozen_backbone: return "frozen_backbone";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : all_variants()) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> variants{Variant::doprompt,  Variant::erm,
                                             Variant::no_adapter, Variant::no_lw,
                                             Variant::no_ladapt,  Variant::frozen_backbone};
  return variants;
}

InferenceMode inference_mode_for(Variant variant) {
  switch (variant) {
    case Variant::erm: return InferenceMode::prompt_free;
    case Variant::no_adapter: return InferenceMode::prompt_averaged;
    default: return InferenceMode::adapted;
  }
}

void TrainConfig::validate() const {
  model.validate();
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_per_domain == 0) throw ConfigError("batch_per_domain must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (prompt_length == 0) throw ConfigError("prompt_length must be positive");
  if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
  if (log_interval == 0) throw ConfigError("log_interval must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (num_domains < 2) throw ConfigError("num_domains must be at least 2");
  if (target_domain < 0 || static_cast<std::size_t>(target_domain) >= num_domains) {
    throw ConfigError("target_domain " + std::to_string(target_domain) + " outside [0, " +
                      std::to_string(num_domains) + ")");
  }
}

TrainPlan plan_for(Variant variant, double lambda) {
  TrainPlan plan;
  plan.lambda = lambda;
  switch (variant) {
    case Variant::doprompt:
      break;
    case Variant::erm:
      plan.erm = true;
      plan.terms = {false, false, false};
      plan.train_prompts = false;
      plan.train_adapter = false;
      break;
    case Variant::no_adapter:
      plan.terms = {true, false, false};
      plan.train_adapter = false;
      break;
    case Variant::no_lw:
      plan.lambda = 0.0;
      break;
    case Variant::no_ladapt:
      plan.terms.adapt = false;
      break;
    case Variant::frozen_backbone:
      plan.train_featurizer = false;
      break;
  }
  return plan;
}

ModelState ModelState::init(const DoPromptModel& model, const TrainPlan& plan) {
  ModelState state;
  state.model = model;
  state.plan = plan;
  state.optimizer = adamw_init(state.trainable());
  return state;
}

std::vector<NamedTensor> ModelState::trainable_named() const {
  std::vector<NamedTensor> out;
  for (NamedTensor& nt : model.named()) {
    bool train = false;
    if (nt.name.starts_with("classifier.")) {
      train = plan.train_classifier;
    } else if (nt.name.starts_with("vit.")) {
      train = plan.train_featurizer;
    } else if (nt.name.starts_with("prompts.")) {
      train = plan.train_prompts;
    } else if (nt.name.starts_with("adapter.")) {
      train = plan.train_adapter;
    }
    if (train) out.push_back(std::move(nt));
  }
  return out;
}

std::vector<Tensor> ModelState::trainable() const {
  std::vector<Tensor> out;
  for (NamedTensor& nt : trainable_named()) out.push_back(nt.tensor);
  return out;
}

std::vector<NamedTensor> ModelState::checkpoint_tensors() const {
  std::vector<NamedTensor> out = model.named();
  out.push_back({"optim.step", Tensor::scalar(static_cast<Real>(optimizer.step))});
  const auto names = trainable_named();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Shape& shape = names[i].tensor.shape();
    out.push_back({"optim.m." + names[i].name,
                   Tensor(shape, optimizer.first[i])});
    out.push_back({"optim.v." + names[i].name,
                   Tensor(shape, optimizer.second[i])});
  }
  return out;
}

void ModelState::restore(std::span<const NamedTensor> tensors) {
  auto targets = checkpoint_tensors();
  assign_named(tensors, targets);
  // Moments and the step counter were copied into temporaries; move them back.
  const auto names = trainable_named();
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : targets) by_name[nt.name] = &nt.tensor;
  optimizer.step = static_cast<std::int64_t>(by_name.at("optim.step")->item());
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto m = by_name.at("optim.m." + names[i].name)->values();
    auto v = by_name.at("optim.v." + names[i].name)->values();
    optimizer.first[i].assign(m.begin(), m.end());
    optimizer.second[i].assign(v.begin(), v.end());
  }
}

ModelState ModelState::clone() const {
  ModelState copy;
  copy.model = model.clone();
  copy.plan = plan;
  copy.optimizer = optimizer;
  return copy;
}

LossBreakdown train_step(ModelState& state, const DomainBatch& batch, const AdamWHyper& hyper,
                         std::mt19937_64* dropout_rng) {
  for (NamedTensor& nt : state.model.named()) nt.tensor.zero_grad();
  const TrainPlan& plan = state.plan;
  LossBreakdown parts;
  Tensor total;
  if (plan.erm) {
    total = loss_erm(state.model, batch, dropout_rng);
    parts.l_prompt = parts.total = total.item();
    parts.lambda = plan.lambda;
  } else {
    TotalLoss tl = total_loss(state.model, batch, plan.lambda, plan.terms, dropout_rng);
    total = tl.total;
    parts = tl.parts;
  }
  const std::pair<const char*, double> components[] = {
      {"l_prompt", parts.l_prompt}, {"l_w", parts.l_w}, {"l_adapt", parts.l_adapt}, {"total", parts.total}};
  for (const auto& [name, value] : components) {
    if (!std::isfinite(value)) {
      throw NumericalError(std::string("non-finite loss component ") + name + " at step " +
                           std::to_string(state.optimizer.step + 1));
    }
  }
  total.backward();
  auto params = state.trainable();
  adamw_step(params, state.optimizer, hyper);
  return parts;
}

Inference infer(const DoPromptModel& model, const Tensor& images) {
  NoGradGuard no_grad;
  const Tensor feature = vit_forward(model.config, model.vit, images, Tensor()).cls_feature;
  Inference result;
  result.weights = adapter_forward(model.adapter, feature);
  const Tensor prompts = compose_adapted_prompts(model.prompts, result.weights);
  result.logits = vit_forward(model.config, model.vit, images, prompts).logits;
  return result;
}

Tensor infer_with_domain_prompt(const DoPromptModel& model, const Tensor& images, std::size_t domain) {
  NoGradGuard no_grad;
  const Tensor prompts = repeat_domain_prompts(model.prompts, domain, images.dim(0));
  return vit_forward(model.config, model.vit, images, prompts).logits;
}

Tensor infer_prompt_averaged(const DoPromptModel& model, const Tensor& images) {
  NoGradGuard no_grad;
  const std::size_t k = model.num_domains();
  if (k == 0) throw ContractError("infer_prompt_averaged: model has no domains");
  Tensor acc = infer_with_domain_prompt(model, images, 0);
  for (std::size_t d = 1; d < k; ++d) acc = add(acc, infer_with_domain_prompt(model, images, d));
  return scale(acc, Real(1) / static_cast<Real>(k));
}

Tensor infer_prompt_free(const DoPromptModel& model, const Tensor& images) {
  NoGradGuard no_grad;
  return vit_forward(model.config, model.vit, images, Tensor()).logits;
}

Tensor predict_logits(const DoPromptModel& model, const Tensor& images, InferenceMode mode) {
  switch (mode) {
    case InferenceMode::adapted: return infer(model, images).logits;
    case InferenceMode::prompt_free: return infer_prompt_free(model, images);
    case InferenceMode::prompt_averaged: return infer_prompt_averaged(model, images);
  }
  throw ContractError("predict_logits: unknown mode");
}

double accuracy_percent(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("accuracy: logits " + shape_string(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t c = logits.dim(1);
  auto v = logits.values();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = v.subspan(b * c, c);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[b]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate_accuracy(const DoPromptModel& model, const SyntheticDataset& data,
                         std::span<const std::size_t> indices, InferenceMode mode) {
  if (indices.empty()) throw ContractError("evaluate_accuracy: no images");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const auto chunk = indices.subspan(start, std::min(kEvalChunk, indices.size() - start));
    const Tensor logits = predict_logits(model, data.images(chunk), mode);
    const auto labels = data.labels_of(chunk);
    correct += static_cast<std::size_t>(
        std::lround(accuracy_percent(logits, labels) * static_cast<double>(chunk.size()) / 100.0));
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(indices.size());
}

DomainSampler::DomainSampler(std::vector<std::size_t> indices, std::uint64_t seed)
    : indices_(std::move(indices)), rng_(seed) {
  if (indices_.empty()) throw ContractError("DomainSampler: empty domain");
  shuffle_indices(indices_, rng_);
}

std::vector<std::size_t> DomainSampler::next(std::size_t count) {
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (cursor_ == indices_.size()) {
      shuffle_indices(indices_, rng_);
      cursor_ = 0;
    }
    out.push_back(indices_[cursor_++]);
  }
  return out;
}

DomainSplit split_domains(const SyntheticDataset& data, int target_domain, double val_fraction,
                          std::uint64_t seed) {
  if (target_domain < 0 || static_cast<std::size_t>(target_domain) >= data.num_domains) {
    throw ConfigError("target_domain " + std::to_string(target_domain) + " outside [0, " +
                      std::to_string(data.num_domains) + ")");
  }
  DomainSplit split;
  split.test = data.indices_of_domain(target_domain);
  if (split.test.empty()) throw ConfigError("target domain has no images");
  for (std::size_t d = 0; d < data.num_domains; ++d) {
    if (static_cast<int>(d) == target_domain) continue;
    auto idx = data.indices_of_domain(static_cast<int>(d));
    if (idx.size() < 2) {
      throw ConfigError("source domain " + std::to_string(d) + " needs at least 2 images");
    }
    std::mt19937_64 rng(derive_seed(seed, kSplitStream, d));
    shuffle_indices(idx, rng);
    auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(idx.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    const std::size_t n_train = idx.size() - n_val;
    split.source_domains.push_back(static_cast<int>(d));
    split.train.emplace_back(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  return split;
}

ExperimentResult run_experiment(const SyntheticDataset& data, const TrainConfig& config,
                                const ProgressFn& progress) {
  config.validate();
  if (config.model.num_classes != data.num_classes || config.model.channels != data.channels ||
      config.model.image_size != data.height || data.height != data.width) {
    throw ConfigError("model config does not match the dataset (classes/channels/image size)");
  }
  ExperimentResult result;
  result.variant = config.variant;
  result.target_domain = config.target_domain;
  result.seed = config.seed;
  result.split = split_domains(data, config.target_domain, config.val_fraction, config.seed);
  const std::size_t k = result.split.source_domains.size();
  if (uses_adapter(config.variant) && k < 2) {
    throw ConfigError("variant " + std::string(variant_name(config.variant)) +
                      " needs at least 2 source domains");
  }

  const TrainPlan plan = plan_for(config.variant, config.lambda);
  const DoPromptModel model =
      DoPromptModel::init(config.model, k, config.prompt_length, derive_seed(config.seed, kModelStream));
  ModelState state = ModelState::init(model, plan);
  const AdamWHyper hyper{config.lr, 0.9, 0.999, 1e-8, config.weight_decay};
  std::mt19937_64 dropout_rng(derive_seed(config.seed, kDropoutStream));
  std::vector<DomainSampler> samplers;
  for (std::size_t d = 0; d < k; ++d) {
    samplers.emplace_back(result.split.train[d], derive_seed(config.seed, kSamplerStream, d));
  }
  std::vector<std::size_t> validation;
  for (const auto& v : result.split.validation) validation.insert(validation.end(), v.begin(), v.end());
  const InferenceMode mode = inference_mode_for(config.variant);

  bool have_best = false;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    DomainBatch batch;
    std::vector<std::size_t> indices;
    for (std::size_t d = 0; d < k; ++d) {
      const auto picked = samplers[d].next(config.batch_per_domain);
      indices.insert(indices.end(), picked.begin(), picked.end());
      batch.domains.insert(batch.domains.end(), picked.size(), static_cast<int>(d));
    }
    batch.images = data.images(indices);
    batch.labels = data.labels_of(indices);
    const LossBreakdown loss =
        train_step(state, batch, hyper, config.model.dropout > 0.0 ? &dropout_rng : nullptr);
    if (step == 1 || step % config.log_interval == 0 || step == config.steps) {
      result.loss_curve.push_back({step, loss});
    }
    if (step % config.eval_interval == 0 || step == config.steps) {
      const double acc = evaluate_accuracy(state.model, data, validation, mode);
      result.selection.steps.push_back(step);
      result.selection.val_acc.push_back(acc);
      if (!have_best || acc > result.selection.chosen_val_acc) {
        have_best = true;
        result.selection.chosen_step = step;
        result.selection.chosen_val_acc = acc;
        result.best = state.clone();
      }
      if (progress) {
        std::ostringstream os;
        os << variant_name(config.variant) << " target=" << config.target_domain
           << " seed=" << config.seed << " step=" << step << " loss=" << std::fixed
           << std::setprecision(4) << loss.total << " val_acc=" << std::setprecision(2) << acc;
        progress(os.str());
      }
    }
  }
  result.test_acc = evaluate_accuracy(result.best.model, data, result.split.test, mode);
  return result;
}

std::string loss_curve_csv(const std::vector<LossRow>& rows) {
  std::ostringstream os;
  os << "step,l_prompt,l_w,l_adapt,total\n";
  os << std::setprecision(9);
  for (const LossRow& r : rows) {
    os << r.step << ',' << r.loss.l_prompt << ',' << r.loss.l_w << ',' << r.loss.l_adapt << ','
       << r.loss.total << '\n';
  }
  return os.str();
}

}  // namespace doprompt
