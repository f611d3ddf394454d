#include <gtest/gtest.h>

#include "cnc/global_conditioning.hpp"
#include "../support/gradcheck.hpp"

namespace cnc::global {
namespace {

using testing::grad_check;
using testing::probe_weights;
using testing::weighted_sum;

Mask mask_from(int h, int w, std::initializer_list<int> bits) {
  Mask m(h, w);
  int i = 0;
  for (int b : bits) {
    m.set(i / w, i % w, b != 0);
    ++i;
  }
  return m;
}

Mask random_mask(int s, std::mt19937_64& rng) {
  Mask m(s, s);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) m.set(y, x, (rng() & 1) != 0);
  return m;
}

TEST(GuidanceMask, HandEnumeratedTwoByTwo) {
  const auto m = build_guidance_mask(mask_from(2, 2, {1, 1, 0, 0}), 2, 2, 1, 1);
  const int expect[4][3] = {{1, 1, 0}, {1, 1, 0}, {1, 0, 1}, {1, 0, 1}};
  ASSERT_EQ(m.rows, 4);
  ASSERT_EQ(m.cols, 3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(m(i, j), expect[i][j] != 0) << i << "," << j;
}

TEST(GuidanceMask, AllOnesAndStructure) {
  const auto ones = build_guidance_mask(Mask(16, 16, true), 4, 4, 8, 4);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 4; ++j) {
      EXPECT_TRUE(ones(i, 8 + j));
      EXPECT_FALSE(ones(i, 12 + j));
    }
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = build_guidance_mask(random_mask(16, rng), 8, 8, 3, 2);
    for (int i = 0; i < m.rows; ++i) {
      for (int j = 0; j < 3; ++j) ASSERT_TRUE(m(i, j));
      for (int j = 0; j < 2; ++j) {
        ASSERT_NE(m(i, 3 + j), m(i, 5 + j));
        ASSERT_EQ(m(i, 3 + j), m(i, 3));
      }
    }
  }
  EXPECT_THROW(build_guidance_mask(Mask(4, 4), 0, 0, 1, 1), Error);
}

TEST(GuidanceMask, AreaThreshold) {
  // 4x4 -> 2x2: top-left block has 2 of 4 set (>= 0.5), top-right 1 of 4.
  const Mask m = mask_from(4, 4, {1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1});
  const Mask d = downsample_mask(m, 2, 2);
  EXPECT_TRUE(d(0, 0));
  EXPECT_FALSE(d(0, 1));
  EXPECT_TRUE(d(1, 0));
  EXPECT_TRUE(d(1, 1));
}

TEST(Attention, HandCaseZeroLogits) {
  // S == 0 via zero queries; mask row [1, 1, 0].
  const auto q = Var<double>::constant(Tensor<double>({1, 1, 4}));
  const auto k = Var<double>::constant(probe_weights({1, 3, 4}, 1));
  const auto v = Var<double>::constant(probe_weights({1, 3, 4}, 2));
  BoolMatrix m(1, 3);
  m.set(0, 2, false);
  std::vector<BoolMatrix> masks{m};
  Tensor<double> w;
  ops::masked_attention(q, k, v, 1, masks, MaskMode::additive, &w);
  EXPECT_EQ(w[0], 0.5);
  EXPECT_EQ(w[1], 0.5);
  EXPECT_EQ(w[2], 0.0);
  ops::masked_attention(q, k, v, 1, masks, MaskMode::hadamard, &w);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(w[static_cast<std::size_t>(j)], 1.0 / 3.0, 1e-15);
}

TEST(Attention, AllTrueMaskEqualsUnmasked) {
  const auto q = Var<float>::constant(probe_weights({2, 5, 8}, 3).cast<float>());
  const auto k = Var<float>::constant(probe_weights({2, 7, 8}, 4).cast<float>());
  const auto v = Var<float>::constant(probe_weights({2, 7, 8}, 5).cast<float>());
  std::vector<BoolMatrix> masks(2, BoolMatrix(5, 7, true));
  for (auto mode : {MaskMode::additive, MaskMode::hadamard}) {
    const auto a = ops::masked_attention(q, k, v, 2, masks, mode);
    const auto b = ops::masked_attention(q, k, v, 2, std::span<const BoolMatrix>{}, mode);
    EXPECT_EQ(a.value(), b.value());
  }
}

TEST(Attention, ZeroLeakTextUbiquityRowStochastic) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int side = std::uniform_int_distribution<int>(1, 8)(rng);
    const int T = std::uniform_int_distribution<int>(1, 8)(rng);
    const int N = std::uniform_int_distribution<int>(1, 4)(rng);
    const int heads = 8, D = 16, J = T + 2 * N, I = side * side;
    const Mask M = random_mask(side, rng);
    std::vector<BoolMatrix> masks{build_guidance_mask(M, side, side, T, N)};
    const auto q = Var<double>::constant(randn<double>({1, I, D}, rng, 2.0));
    const auto k = Var<double>::constant(randn<double>({1, J, D}, rng, 2.0));
    const auto v = Var<double>::constant(randn<double>({1, J, D}, rng));
    for (auto mode : {MaskMode::additive, MaskMode::hadamard}) {
      Tensor<double> w;
      ops::masked_attention(q, k, v, heads, masks, mode, &w);
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < I; ++i) {
          const double* row = w.data() + (static_cast<std::size_t>(h) * I + i) * J;
          double sum = 0;
          for (int j = 0; j < J; ++j) sum += row[j];
          ASSERT_NEAR(sum, 1.0, 1e-6);
          for (int j = 0; j < T; ++j) ASSERT_GT(row[j], 0.0);
          if (mode == MaskMode::additive) {
            const bool fg = M[static_cast<std::size_t>(i)];
            for (int j = 0; j < N; ++j) ASSERT_EQ(row[T + (fg ? N : 0) + j], 0.0);
          }
        }
    }
  }
}

TEST(Context, LayoutAndLambdaScaling) {
  const auto text = Var<float>::constant(probe_weights({1, 3, 4}, 1).cast<float>());
  const auto fg = Var<float>::constant(probe_weights({1, 2, 4}, 2).cast<float>());
  const auto bg = Var<float>::constant(probe_weights({1, 2, 4}, 3).cast<float>());
  auto ctx = [&](float lf, float lb) {
    const std::vector<float> a{lf}, b{lb};
    return assemble_context<float>(text, fg, bg, a, b).value();
  };
  const auto one = ctx(1, 1);
  ASSERT_EQ(one.shape(), (Shape{1, 7, 4}));
  for (int d = 0; d < 12; ++d) EXPECT_EQ(one[static_cast<std::size_t>(d)], text.value()[static_cast<std::size_t>(d)]);
  for (int d = 0; d < 8; ++d) {
    EXPECT_EQ(one[12 + static_cast<std::size_t>(d)], fg.value()[static_cast<std::size_t>(d)]);
    EXPECT_EQ(one[20 + static_cast<std::size_t>(d)], bg.value()[static_cast<std::size_t>(d)]);
  }
  const auto zero_fg = ctx(0, 1);
  for (int d = 0; d < 8; ++d) EXPECT_EQ(zero_fg[12 + static_cast<std::size_t>(d)], 0.0f);
  const auto two_bg = ctx(1, 2);
  for (int d = 0; d < 8; ++d) EXPECT_EQ(two_bg[20 + static_cast<std::size_t>(d)], 2 * bg.value()[static_cast<std::size_t>(d)]);
  for (int d = 0; d < 20; ++d) EXPECT_EQ(two_bg[static_cast<std::size_t>(d)], one[static_cast<std::size_t>(d)]);
  const auto bad = Var<float>::constant(Tensor<float>({1, 2, 5}));
  const std::vector<float> l{1};
  EXPECT_THROW(assemble_context<float>(text, bad, bg, l, l), Error);
}

TEST(GlobalFuser, ZeroInitAndHomogeneity) {
  nn::ParamStore<double> store;
  std::mt19937_64 rng(2);
  GlobalFuserConfig cfg{8, 6, 3, 5, false};
  GlobalFuser<double> g(nn::Builder<double>(store, "global", rng), cfg);
  const auto e = Var<double>::constant(probe_weights({1, 8}, 3));
  EXPECT_EQ(max_abs(g(e, Stream::fg).value()), 0.0);
  EXPECT_EQ(g(e, Stream::fg).shape(), (Shape{1, 3, 5}));
  for (auto& p : store.params()) p.var.mutable_value() = randn<double>(p.var.shape(), rng);
  // Purely linear stack without biases is homogeneous.
  for (auto* b : {&g.fg1.bias, &g.fg2.bias}) b->mutable_value().fill(0.0);
  const auto e2 = Var<double>::constant(Tensor<double>({1, 8}, [&] {
    auto v = e.value().to_vector();
    for (auto& x : v) x *= 2;
    return v;
  }()));
  const auto a = g(e, Stream::fg).value(), b = g(e2, Stream::fg).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 2 * a[i], 1e-12);
  EXPECT_GT(max_abs_diff(g(e, Stream::fg).value(), g(e, Stream::bg).value()), 1e-6);
  EXPECT_THROW(g(Var<double>::constant(Tensor<double>({1, 7})), Stream::fg), Error);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  nn::ParamStore<double> store;
  std::mt19937_64 rng(9);
  nn::Builder<double> b(store, "frozen", rng);
  nn::Linear<double> wq(b.scope("q"), 8, 8, nn::Init::fan_in, false), wk(b.scope("k"), 6, 8, nn::Init::fan_in, false),
      wv(b.scope("v"), 6, 8, nn::Init::fan_in, false);
  auto x = Var<double>::parameter(randn<double>({2, 4, 8}, rng));
  auto ctx = Var<double>::parameter(randn<double>({2, 5, 6}, rng));
  std::vector<BoolMatrix> masks{build_guidance_mask(mask_from(2, 2, {1, 0, 0, 1}), 2, 2, 1, 2),
                                build_guidance_mask(mask_from(2, 2, {0, 0, 1, 1}), 2, 2, 1, 2)};
  const auto probe = probe_weights({2, 4, 8}, 10);
  for (auto mode : {MaskMode::additive, MaskMode::hadamard}) {
    std::vector<Var<double>> in{x, ctx, wq.weight, wk.weight, wv.weight};
    const auto r = grad_check(in, [&] {
      return weighted_sum(masked_cross_attention(x, ctx, masks, wq, wk, wv, 2, mode), probe);
    });
    EXPECT_LT(r.relative_error, 1e-4);
  }
  std::vector<BoolMatrix> wrong{BoolMatrix(4, 4), BoolMatrix(4, 4)};
  EXPECT_THROW(masked_cross_attention(x, ctx, wrong, wq, wk, wv, 2, MaskMode::additive), Error);
}

}  // namespace
}  // namespace cnc::global
