#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doprompt/checkpoint.hpp"
#include "doprompt/errors.hpp"
#include "doprompt/optim.hpp"

using namespace doprompt;

TEST(AdamW, DecayOnlyStep) {
  std::vector<Tensor> p{Tensor({3}, {1.0f, -2.0f, 0.5f}, true)};
  p[0].mutable_grad();
  AdamWState st = adamw_init(p);
  adamw_step(p, st, {.lr = 0.1, .weight_decay = 0.01});
  EXPECT_NEAR(p[0].values()[0], 0.999, 1e-7);
  EXPECT_NEAR(p[0].values()[1], -1.998, 1e-7);
  EXPECT_NEAR(p[0].values()[2], 0.4995, 1e-7);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, MatchesReferenceTrajectory) {
  // Values from a float64 reference AdamW (lr 0.1, wd 0.01, default betas).
  const double expected[3][3] = {{0.899000010, -1.898000005, 0.399500003},
                                 {0.801582814, -1.796102010, 0.305882543},
                                 {0.704981113, -1.694305913, 0.218260812}};
  std::vector<Tensor> p{Tensor({3}, {1.0f, -2.0f, 0.5f}, true)};
  AdamWState st = adamw_init(p);
  // Independent loop oracle alongside the reference values.
  double q[3] = {1.0, -2.0, 0.5}, m[3] = {}, v[3] = {};
  for (int t = 1; t <= 3; ++t) {
    const double g[3] = {0.1 * t, -0.2, 0.3 / t};
    auto grad = p[0].mutable_grad();
    for (int i = 0; i < 3; ++i) grad[i] = static_cast<Real>(g[i]);
    adamw_step(p, st, {.lr = 0.1, .weight_decay = 0.01});
    for (int i = 0; i < 3; ++i) {
      q[i] -= 0.1 * 0.01 * q[i];
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      q[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p[0].values()[i], expected[t - 1][i], 1e-6);
      EXPECT_NEAR(q[i], expected[t - 1][i], 1e-8);
    }
  }
}

TEST(AdamW, MissingGradientActsAsZero) {
  std::vector<Tensor> p{Tensor({1}, {2.0f}, true)};
  AdamWState st = adamw_init(p);
  adamw_step(p, st, {.lr = 0.5, .weight_decay = 0.0});
  EXPECT_EQ(p[0].values()[0], 2.0f);
}

TEST(Checkpoint, RoundTrip) {
  std::vector<NamedTensor> src{{"a", Tensor({2, 2}, {1, 2, 3, 4})}, {"b.c", Tensor::scalar(-7.5f)}};
  std::stringstream buf;
  write_checkpoint(buf, src);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "DPT1");
  auto back = read_checkpoint(buf);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[0].tensor.shape(), (Shape{2, 2}));
  EXPECT_EQ(back[0].tensor.values()[3], 4.0f);
  EXPECT_EQ(back[1].tensor.item(), -7.5f);

  std::vector<NamedTensor> dst{{"b.c", Tensor::scalar(0)}, {"a", Tensor::zeros({2, 2})}};
  assign_named(back, dst);
  EXPECT_EQ(dst[1].tensor.values()[2], 3.0f);
  std::vector<NamedTensor> wrong{{"a", Tensor::zeros({4})}};
  EXPECT_THROW(assign_named(back, wrong), Error);
  std::vector<NamedTensor> missing{{"zzz", Tensor::zeros({4})}};
  EXPECT_THROW(assign_named(back, missing), Error);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  std::stringstream bad("XXXX1234");
  EXPECT_THROW(read_checkpoint(bad), FormatError);
  std::vector<NamedTensor> src{{"w", Tensor({3}, {1, 2, 3})}};
  std::stringstream buf;
  write_checkpoint(buf, src);
  std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(read_checkpoint(cut), FormatError);
}

TEST(Checkpoint, FileErrors) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.dpt"), FormatError);
  const auto path = std::filesystem::temp_directory_path() / "doprompt_ckpt_test.dpt";
  std::vector<NamedTensor> src{{"w", Tensor({3}, {1, 2, 3})}};
  save_checkpoint(path, src);
  EXPECT_EQ(load_checkpoint(path)[0].tensor.values()[1], 2.0f);
  std::filesystem::remove(path);
}
