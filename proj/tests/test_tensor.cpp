#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "doprompt/errors.hpp"
#include "doprompt/ops.hpp"
#include "grad_cases.hpp"

using namespace doprompt;
using doprompt::testing::rand_tensor;
using doprompt::testing::values_of;

namespace {

Tensor make(Shape s, std::vector<Real> v, bool grad = false) { return Tensor(std::move(s), std::move(v), grad); }

// Phi(x) from its Taylor series, independent of std::erf.
double phi_series(double x) {
  const double z = x / std::sqrt(2.0);
  double term = z, sum = z;
  for (int n = 1; n < 60; ++n) {
    term *= -z * z / n;
    sum += term / (2 * n + 1);
  }
  return 0.5 + sum / std::sqrt(M_PI);
}

}  // namespace

TEST(Tensor, ConstructionAndShapes) {
  Tensor t = make({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(t.dim(2), IndexError);
  EXPECT_THROW(make({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor().shape(), ContractError);
  EXPECT_THROW(t.item(), ContractError);
  EXPECT_EQ(Tensor::scalar(3).item(), Real(3));
}

TEST(Tensor, CloneIsDeepDetachSharesValues) {
  Tensor t = make({2}, {1, 2}, true);
  Tensor c = t.clone();
  c.mutable_values()[0] = 9;
  EXPECT_EQ(t.values()[0], Real(1));
  EXPECT_FALSE(t.detach().requires_grad());
}

TEST(Ops, SoftmaxKnownValues) {
  Tensor x = make({1, 3}, {Real(std::log(1.0)), Real(std::log(2.0)), Real(std::log(3.0))});
  auto p = values_of(softmax(x, 1));
  EXPECT_NEAR(p[0], 1.0 / 6.0, 1e-6);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(p[2], 0.5, 1e-6);
}

TEST(Ops, SoftmaxSimplexForExtremeInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = rand_tensor({4, 7}, rng, -80, 80, false);
    auto p = values_of(softmax(x, 1));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p[r * 7 + c], 0.0);
        s += p[r * 7 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  Tensor big = make({1, 2}, {Real(1e30), Real(-1e30)});
  EXPECT_NEAR(softmax(big, 1).values()[0], 1.0, 1e-6);
}

TEST(Ops, CrossEntropyUniformLogits) {
  Tensor x = Tensor::zeros({2, 4});
  const int t[] = {0, 3};
  EXPECT_NEAR(cross_entropy(x, t).item(), std::log(4.0), 1e-6);
  const int bad[] = {0, 4};
  EXPECT_THROW(cross_entropy(x, bad), IndexError);
}

TEST(Ops, CrossEntropyMatchesLogSoftmax) {
  Tensor x = make({2, 3}, {1.0f, -0.5f, 2.0f, 0.3f, 0.3f, -1.0f});
  const int t[] = {2, 0};
  double expect = 0.0;
  const double rows[2][3] = {{1.0, -0.5, 2.0}, {0.3, 0.3, -1.0}};
  for (int r = 0; r < 2; ++r) {
    double z = 0.0;
    for (double v : rows[r]) z += std::exp(v);
    expect += -(rows[r][t[r]] - std::log(z)) / 2.0;
  }
  EXPECT_NEAR(cross_entropy(x, t).item(), expect, 1e-6);
}

TEST(Ops, GeluMatchesSeriesOracle) {
  EXPECT_NEAR(gelu(Tensor::scalar(1)).item(), 0.8413447460685429, 1e-6);
  for (double x : {-3.0, -1.2, -0.1, 0.0, 0.4, 2.5}) {
    EXPECT_NEAR(gelu(Tensor::scalar(Real(x))).item(), x * phi_series(x), 1e-6) << x;
  }
}

TEST(Ops, LayerNormDirectFormula) {
  Tensor x = make({1, 4}, {1, 2, 4, 7});
  Tensor g = make({4}, {1, 2, 1, 0.5f});
  Tensor b = make({4}, {0, 0, 1, 0});
  auto y = values_of(layer_norm(x, g, b));
  const double m = 3.5, var = (6.25 + 2.25 + 0.25 + 12.25) / 4.0;
  const double xs[] = {1, 2, 4, 7}, gs[] = {1, 2, 1, 0.5}, bs[] = {0, 0, 1, 0};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (xs[i] - m) / std::sqrt(var + 1e-5) * gs[i] + bs[i], 1e-6);
}

TEST(Ops, MatmulAndLinear) {
  Tensor a = make({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = make({3, 2}, {1, 0, 0, 1, 1, 1});
  auto c = values_of(matmul(a, b));
  EXPECT_EQ(std::vector<Real>(c.begin(), c.end()), (std::vector<Real>{4, 5, 10, 11}));
  Tensor bias = make({2}, {1, -1});
  auto l = values_of(linear(a, b, bias));
  EXPECT_EQ(l[0], Real(5));
  EXPECT_EQ(l[3], Real(10));
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Ops, MatmulGradientOfSum) {
  std::mt19937_64 rng(11);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  auto rep = doprompt::testing::check_gradients({a, b}, [&] { return sum(matmul(a, b)); }, 1e-3);
  EXPECT_LT(rep.worst_error, 1e-3);
}

TEST(Ops, PatchifyIsFlattenPerPatch) {
  std::mt19937_64 rng(5);
  Tensor img = rand_tensor({2, 3, 4, 4}, rng, 0, 1, false);
  auto p = values_of(patchify(img, 2));
  auto v = img.values();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t gy = 0; gy < 2; ++gy)
      for (std::size_t gx = 0; gx < 2; ++gx)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 2; ++x) {
              const std::size_t patch = gy * 2 + gx;
              const std::size_t k = (c * 2 + y) * 2 + x;
              EXPECT_EQ(p[(b * 4 + patch) * 12 + k], v[((b * 3 + c) * 4 + gy * 2 + y) * 4 + gx * 2 + x]);
            }
}

TEST(Ops, AttentionMatchesNaiveLoops) {
  std::mt19937_64 rng(8);
  const std::size_t B = 2, T = 3, D = 4, H = 2, dh = 2;
  Tensor qkv = rand_tensor({B, T, 3 * D}, rng, -1, 1, false);
  auto out = values_of(multi_head_attention(qkv, H));
  auto probs = values_of(attention_probabilities(qkv, H));
  auto v = qkv.values();
  auto at = [&](std::size_t b, std::size_t t, std::size_t part, std::size_t h, std::size_t i) {
    return static_cast<double>(v[(b * T + t) * 3 * D + part * D + h * dh + i]);
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < T; ++q) {
        double s[T], z = 0.0, row = 0.0;
        for (std::size_t k = 0; k < T; ++k) {
          s[k] = 0.0;
          for (std::size_t i = 0; i < dh; ++i) s[k] += at(b, q, 0, h, i) * at(b, k, 1, h, i);
          s[k] = std::exp(s[k] / std::sqrt(double(dh)));
          z += s[k];
        }
        for (std::size_t k = 0; k < T; ++k) {
          EXPECT_NEAR(probs[((b * H + h) * T + q) * T + k], s[k] / z, 1e-6);
          row += probs[((b * H + h) * T + q) * T + k];
        }
        EXPECT_NEAR(row, 1.0, 1e-6);
        for (std::size_t i = 0; i < dh; ++i) {
          double o = 0.0;
          for (std::size_t k = 0; k < T; ++k) o += s[k] / z * at(b, k, 2, h, i);
          EXPECT_NEAR(out[(b * T + q) * D + h * dh + i], o, 1e-6);
        }
      }
}

TEST(Ops, MixPromptsBruteForce) {
  std::mt19937_64 rng(2);
  const std::size_t K = 3, L = 2, D = 4, B = 2;
  Tensor bank = rand_tensor({K, L, D}, rng, -1, 1, false);
  Tensor w = rand_tensor({B, L, K}, rng, 0, 1, false);
  auto out = values_of(mix_prompts(bank, w));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t e = 0; e < D; ++e) {
        double s = 0.0;
        for (std::size_t d = 0; d < K; ++d) s += w.values()[(b * L + j) * K + d] * bank.values()[(d * L + j) * D + e];
        EXPECT_NEAR(out[(b * L + j) * D + e], s, 1e-6);
      }
}

TEST(Autograd, DetachBlocksOnePath) {
  Tensor x = make({3}, {1, 2, 3}, true);
  sum(add(x, x.detach())).backward();
  for (Real g : x.grad()) EXPECT_EQ(g, Real(1));
}

TEST(Autograd, LeavesAccumulateAcrossSweeps) {
  Tensor x = make({2}, {1, 2}, true);
  sum(scale(x, 2)).backward();
  sum(scale(x, 2)).backward();
  EXPECT_EQ(x.grad()[0], Real(4));
  x.zero_grad();
  EXPECT_EQ(x.grad()[1], Real(0));
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Tensor x = make({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(sum(x).requires_grad());
  }
  EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Autograd, BackwardNeedsScalar) {
  Tensor x = make({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2).backward(), ContractError);
}

TEST(Autograd, OptionalInputsInGraph) {
  std::mt19937_64 rng(1);
  Tensor x = rand_tensor({2, 3}, rng);
  Tensor w = rand_tensor({3, 2}, rng);
  sum(linear(x, w, Tensor())).backward();
  EXPECT_TRUE(w.has_grad());
}

TEST(Autograd, TwoLayerMlpGradients) {
  std::mt19937_64 rng(21);
  Tensor x = rand_tensor({4, 3}, rng, -1, 1, false);
  Tensor w1 = rand_tensor({3, 5}, rng), b1 = rand_tensor({5}, rng);
  Tensor w2 = rand_tensor({5, 2}, rng), b2 = rand_tensor({2}, rng);
  const int t[] = {0, 1, 1, 0};
  auto loss = [&] { return cross_entropy(linear(gelu(linear(x, w1, b1)), w2, b2), t); };
  auto rep = doprompt::testing::check_gradients({w1, b1, w2, b2}, loss, 1e-2, true);
  EXPECT_LT(rep.worst_error, 1e-3) << rep.worst_input;
}
