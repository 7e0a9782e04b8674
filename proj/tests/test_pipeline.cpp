#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "doprompt/errors.hpp"
#include "doprompt/ops.hpp"
#include "doprompt/pipeline.hpp"

using namespace doprompt;

namespace {

std::vector<Real> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TrainConfig small_config() {
  TrainConfig c;
  c.model.image_size = 32;
  c.model.patch_size = 8;
  c.model.embed_dim = 16;
  c.model.depth = 1;
  c.model.num_heads = 2;
  c.model.mlp_ratio = 2;
  c.model.dropout = 0.0;
  c.model.num_classes = 5;
  c.steps = 6;
  c.batch_per_domain = 4;
  c.eval_interval = 3;
  c.log_interval = 2;
  c.prompt_length = 2;
  c.num_domains = 3;
  c.per_domain = 20;
  return c;
}

const SyntheticDataset& small_data() {
  static const SyntheticDataset data = generate_dataset(3, 20, 1);
  return data;
}

DomainBatch batch_from(const SyntheticDataset& data, std::size_t offset, std::size_t per_domain,
                       std::span<const int> domains) {
  DomainBatch b;
  std::vector<std::size_t> idx;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    auto all = data.indices_of_domain(domains[d]);
    for (std::size_t i = 0; i < per_domain; ++i) {
      idx.push_back(all[(offset + i) % all.size()]);
      b.domains.push_back(static_cast<int>(d));
    }
  }
  b.images = data.images(idx);
  b.labels = data.labels_of(idx);
  return b;
}

}  // namespace

TEST(Variants, NamesRoundTrip) {
  ASSERT_EQ(all_variants().size(), 6u);
  for (Variant v : all_variants()) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("dopromt"), ConfigError);
  EXPECT_EQ(inference_mode_for(Variant::erm), InferenceMode::prompt_free);
  EXPECT_EQ(inference_mode_for(Variant::no_adapter), InferenceMode::prompt_averaged);
  EXPECT_EQ(inference_mode_for(Variant::frozen_backbone), InferenceMode::adapted);
}

TEST(Variants, Plans) {
  TrainPlan p = plan_for(Variant::doprompt, 0.5);
  EXPECT_TRUE(p.terms.prompt && p.terms.adapt && p.terms.weights);
  EXPECT_EQ(p.lambda, 0.5);
  EXPECT_TRUE(plan_for(Variant::erm, 1).erm);
  EXPECT_FALSE(plan_for(Variant::no_adapter, 1).train_adapter);
  EXPECT_EQ(plan_for(Variant::no_lw, 1).lambda, 0.0);
  EXPECT_FALSE(plan_for(Variant::no_ladapt, 1).terms.adapt);
  TrainPlan frozen = plan_for(Variant::frozen_backbone, 1);
  EXPECT_FALSE(frozen.train_featurizer);
  EXPECT_TRUE(frozen.train_prompts && frozen.train_adapter);
}

TEST(Config, Validation) {
  TrainConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.target_domain = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.val_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.batch_per_domain = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Split, DisjointSeededEightyTwenty) {
  const auto& data = small_data();
  auto s = split_domains(data, 1, 0.2, 4);
  EXPECT_EQ(s.source_domains, (std::vector<int>{0, 2}));
  EXPECT_EQ(s.test, data.indices_of_domain(1));
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_EQ(s.train[d].size(), 16u);
    EXPECT_EQ(s.validation[d].size(), 4u);
    std::set<std::size_t> all(s.train[d].begin(), s.train[d].end());
    all.insert(s.validation[d].begin(), s.validation[d].end());
    EXPECT_EQ(all.size(), 20u);
    for (std::size_t i : all) EXPECT_EQ(data.domains[i], s.source_domains[d]);
  }
  EXPECT_EQ(split_domains(data, 1, 0.2, 4).train, s.train);
  EXPECT_NE(split_domains(data, 1, 0.2, 5).train, s.train);
  EXPECT_THROW(split_domains(data, 3, 0.2, 0), ConfigError);
}

TEST(Sampler, CoversEveryIndexEachEpoch) {
  std::vector<std::size_t> idx{3, 5, 7, 9, 11};
  DomainSampler s(idx, 2);
  for (int epoch = 0; epoch < 3; ++epoch) {
    auto got = s.next(5);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, idx);
  }
  EXPECT_EQ(s.next(12).size(), 12u);
}

TEST(Inference, PromptAveragedMatchesLoop) {
  DoPromptModel m = DoPromptModel::init(small_config().model, 3, 2, 1);
  const auto& data = small_data();
  const std::size_t idx[] = {0, 7, 33, 50};
  Tensor images = data.images(idx);
  Tensor avg = infer_prompt_averaged(m, images);
  std::vector<double> expect(avg.numel(), 0.0);
  for (std::size_t d = 0; d < 3; ++d) {
    auto one = values_of(infer_with_domain_prompt(m, images, d));
    for (std::size_t i = 0; i < one.size(); ++i) expect[i] += one[i] / 3.0;
  }
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(avg.values()[i], expect[i], 1e-6);
  EXPECT_FALSE(avg.requires_grad());
}

TEST(Inference, AdaptedUsesComposedPrompts) {
  DoPromptModel m = DoPromptModel::init(small_config().model, 3, 2, 2);
  const auto& data = small_data();
  const std::size_t idx[] = {1, 2};
  Tensor images = data.images(idx);
  Inference inf = infer(m, images);
  EXPECT_EQ(inf.weights.shape(), (Shape{2, 2, 3}));
  Tensor prompts = compose_adapted_prompts(m.prompts, inf.weights);
  Tensor logits = vit_forward(m.config, m.vit, images, prompts).logits;
  for (std::size_t i = 0; i < logits.numel(); ++i) EXPECT_NEAR(inf.logits.values()[i], logits.values()[i], 1e-6);
  EXPECT_EQ(predict_logits(m, images, InferenceMode::prompt_free).shape(), (Shape{2, 5}));
}

TEST(Inference, AccuracyPercent) {
  Tensor logits({3, 2}, {1, 0, 0, 1, 2, 3});
  const int labels[] = {0, 0, 1};
  EXPECT_NEAR(accuracy_percent(logits, labels), 200.0 / 3.0, 1e-9);
}

TEST(Training, FrozenAdapterLambdaZeroEqualsPromptOnly) {
  const auto& data = small_data();
  const ViTConfig vc = small_config().model;
  DoPromptModel init = DoPromptModel::init(vc, 2, 2, 3);
  TrainPlan a = plan_for(Variant::doprompt, 0.0);
  a.terms.adapt = false;
  a.train_adapter = false;
  ModelState sa = ModelState::init(init.clone(), a);
  ModelState sb = ModelState::init(init.clone(), plan_for(Variant::no_adapter, 1.0));
  const AdamWHyper hyper{1e-3, 0.9, 0.999, 1e-8, 1e-2};
  const int doms[] = {0, 2};
  for (std::size_t step = 0; step < 5; ++step) {
    DomainBatch b = batch_from(data, step * 3, 3, doms);
    train_step(sa, b, hyper, nullptr);
    train_step(sb, b, hyper, nullptr);
  }
  auto na = sa.model.named(), nb = sb.model.named();
  ASSERT_EQ(na.size(), nb.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i)
    for (std::size_t j = 0; j < na[i].tensor.numel(); ++j)
      worst = std::max(worst, std::abs(double(na[i].tensor.values()[j]) - nb[i].tensor.values()[j]));
  EXPECT_LT(worst, 1e-6);
  // And the run actually moved the featurizer.
  EXPECT_NE(sa.model.vit.patch_weight.values()[0], init.vit.patch_weight.values()[0]);
}

TEST(Training, FrozenGroupsStayPut) {
  const auto& data = small_data();
  DoPromptModel init = DoPromptModel::init(small_config().model, 2, 2, 4);
  ModelState s = ModelState::init(init.clone(), plan_for(Variant::frozen_backbone, 1.0));
  const int doms[] = {0, 1};
  train_step(s, batch_from(data, 0, 3, doms), {}, nullptr);
  EXPECT_EQ(s.model.vit.patch_weight.values()[5], init.vit.patch_weight.values()[5]);
  EXPECT_NE(s.model.prompts.tokens.values()[0], init.prompts.tokens.values()[0]);
}

TEST(Training, NonFiniteLossIsReported) {
  const auto& data = small_data();
  DoPromptModel m = DoPromptModel::init(small_config().model, 2, 2, 5);
  m.vit.head_bias.mutable_values()[0] = std::numeric_limits<Real>::quiet_NaN();
  ModelState s = ModelState::init(m, plan_for(Variant::doprompt, 1.0));
  const int doms[] = {0, 1};
  try {
    train_step(s, batch_from(data, 0, 2, doms), {}, nullptr);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("l_prompt"), std::string::npos) << e.what();
  }
}

TEST(Training, CheckpointStateRoundTrip) {
  const auto& data = small_data();
  ModelState s = ModelState::init(DoPromptModel::init(small_config().model, 2, 2, 6),
                                  plan_for(Variant::doprompt, 1.0));
  const int doms[] = {0, 1};
  train_step(s, batch_from(data, 0, 2, doms), {}, nullptr);
  auto saved = s.checkpoint_tensors();
  ModelState other = ModelState::init(DoPromptModel::init(small_config().model, 2, 2, 99),
                                      plan_for(Variant::doprompt, 1.0));
  other.restore(saved);
  EXPECT_EQ(other.step(), 1);
  auto back = other.checkpoint_tensors();
  ASSERT_EQ(back.size(), saved.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].name, saved[i].name);
    auto x = back[i].tensor.values(), y = saved[i].tensor.values();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << back[i].name;
  }
}

TEST(Experiment, TiesSelectEarliestStep) {
  TrainConfig c = small_config();
  c.lr = 1e-20;  // updates vanish below float resolution, so every evaluation ties
  auto r = run_experiment(small_data(), c);
  ASSERT_EQ(r.selection.steps, (std::vector<std::size_t>{3, 6}));
  EXPECT_EQ(r.selection.val_acc[0], r.selection.val_acc[1]);
  EXPECT_EQ(r.selection.chosen_step, 3u);
  EXPECT_EQ(r.best.step(), 3);
}

TEST(Experiment, DeterministicAndLogged) {
  TrainConfig c = small_config();
  c.model.dropout = 0.1;
  auto a = run_experiment(small_data(), c);
  auto b = run_experiment(small_data(), c);
  EXPECT_EQ(loss_curve_csv(a.loss_curve), loss_curve_csv(b.loss_curve));
  EXPECT_EQ(a.test_acc, b.test_acc);
  std::vector<std::size_t> logged;
  for (const auto& row : a.loss_curve) logged.push_back(row.step);
  EXPECT_EQ(logged, (std::vector<std::size_t>{1, 2, 4, 6}));
  const std::string csv = loss_curve_csv(a.loss_curve);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,l_prompt,l_w,l_adapt,total");
  c.seed = 1;
  EXPECT_NE(loss_curve_csv(run_experiment(small_data(), c).loss_curve), csv);
}

TEST(Experiment, EveryVariantRuns) {
  for (Variant v : all_variants()) {
    TrainConfig c = small_config();
    c.variant = v;
    c.steps = 2;
    c.eval_interval = 2;
    auto r = run_experiment(small_data(), c);
    EXPECT_GE(r.test_acc, 0.0);
    EXPECT_LE(r.test_acc, 100.0);
  }
}

TEST(Experiment, RejectsMismatchedModel) {
  TrainConfig c = small_config();
  c.model.num_classes = 4;
  EXPECT_THROW(run_experiment(small_data(), c), ConfigError);
}
