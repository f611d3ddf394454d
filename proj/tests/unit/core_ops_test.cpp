#include <gtest/gtest.h>

#include "cnc/core/nn.hpp"
#include "cnc/core/ops.hpp"
#include "cnc/core/optim.hpp"
#include "../support/gradcheck.hpp"

namespace cnc {
namespace {

using testing::grad_check;
using testing::probe_weights;
using testing::weighted_sum;

Var<double> param(Shape shape, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return Var<double>::parameter(randn<double>(std::move(shape), rng, scale));
}

TEST(CoreOps, Conv2dGradients) {
  for (int stride : {1, 2}) {
    for (int k : {1, 3}) {
      auto x = param({2, 3, 6, 6}, 1);
      auto w = param({4, 3, k, k}, 2, 0.5);
      auto b = param({4}, 3);
      const int ho = (6 + 2 * (k / 2) - k) / stride + 1;
      auto probe = probe_weights({2, 4, ho, ho}, 4);
      std::vector<Var<double>> in{x, w, b};
      auto r = grad_check(in, [&] { return weighted_sum(ops::conv2d(x, w, b, stride, k / 2), probe); });
      EXPECT_LT(r.relative_error, 1e-6) << "k=" << k << " stride=" << stride;
    }
  }
}

TEST(CoreOps, NormalizationGradients) {
  auto x = param({2, 4, 3, 3}, 5);
  auto g = param({4}, 6);
  auto b = param({4}, 7);
  auto probe = probe_weights({2, 4, 3, 3}, 8);
  std::vector<Var<double>> in{x, g, b};
  EXPECT_LT(grad_check(in, [&] { return weighted_sum(ops::group_norm(x, 2, g, b), probe); }).relative_error, 1e-6);
  std::vector<Var<double>> xin{x};
  EXPECT_LT(grad_check(xin, [&] { return weighted_sum(ops::group_norm(x, 4, Var<double>(), Var<double>()), probe); })
                .relative_error,
            1e-6);

  auto t = param({2, 5, 6}, 9);
  auto lg = param({6}, 10);
  auto lb = param({6}, 11);
  auto tprobe = probe_weights({2, 5, 6}, 12);
  std::vector<Var<double>> tin{t, lg, lb};
  EXPECT_LT(grad_check(tin, [&] { return weighted_sum(ops::layer_norm(t, lg, lb), tprobe); }).relative_error, 1e-6);
}

TEST(CoreOps, LayoutAndPointwiseGradients) {
  auto x = param({2, 3, 4, 4}, 13);
  auto y = param({2, 2, 4, 4}, 14);
  auto bias = param({2, 5}, 15);
  auto probe = probe_weights({2, 5, 8, 8}, 16);
  std::vector<Var<double>> in{x, y, bias};
  auto r = grad_check(in, [&] {
    auto c = ops::concat_channels(ops::silu(x), ops::sigmoid(y));
    c = ops::add_channel(c, bias);
    auto u = ops::upsample_nearest(c, 2);
    return weighted_sum(u, probe);
  });
  EXPECT_LT(r.relative_error, 1e-6);

  auto tprobe = probe_weights({2, 4, 3}, 17);
  auto z = param({2, 3, 4, 4}, 18);
  std::vector<Var<double>> zin{z};
  auto rt = grad_check(zin, [&] {
    auto pooled = ops::avg_pool(z, 2);                      // [2,3,2,2]
    auto tok = ops::to_tokens(pooled);                      // [2,4,3]
    auto back = ops::from_tokens(ops::scale(tok, 3.0), 2, 2);
    return ops::add(weighted_sum(tok, tprobe), ops::mean_all(ops::mul(back, back)));
  });
  EXPECT_LT(rt.relative_error, 1e-6);
}

TEST(CoreOps, LinearAndTokenConcatGradients) {
  auto a = param({2, 3, 5}, 19);
  auto b = param({2, 2, 5}, 20);
  auto w = param({4, 5}, 21);
  auto bb = param({4}, 22);
  auto probe = probe_weights({2, 5, 4}, 23);
  std::vector<Var<double>> in{a, b, w, bb};
  auto r = grad_check(in, [&] { return weighted_sum(ops::linear(ops::concat_tokens<double>({a, b}), w, bb), probe); });
  EXPECT_LT(r.relative_error, 1e-6);
}

TEST(CoreOps, MseAndL1) {
  Tensor<double> target({2, 2}, std::vector<double>{1, 2, 3, 4});
  auto p = Var<double>::parameter(Tensor<double>({2, 2}, std::vector<double>{1, 0, 3, 6}));
  auto loss = ops::mse(p, target);
  EXPECT_DOUBLE_EQ(loss.value()[0], (0 + 4 + 0 + 4) / 4.0);
  backward(loss);
  EXPECT_DOUBLE_EQ(p.grad()[1], 2.0 * (0 - 2) / 4.0);
  auto l = ops::l1(p, target);
  EXPECT_DOUBLE_EQ(l.value()[0], 1.0);
}

TEST(CoreOps, NoGradGuardSkipsGraph) {
  auto x = param({1, 1, 2, 2}, 24);
  NoGradGuard guard;
  auto y = ops::silu(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(CoreOps, AdamMovesAgainstGradient) {
  nn::ParamStore<double> store;
  auto p = store.add("p", "g", Tensor<double>({1}, 1.0));
  auto loss = ops::mse(p, Tensor<double>({1}, 0.0));
  backward(loss);
  nn::Adam<double> opt(0.1);
  opt.step(store);
  EXPECT_NEAR(p.value()[0], 0.9, 1e-9);
}

TEST(CoreOps, ClipGradNormRescales) {
  nn::ParamStore<double> store;
  auto p = store.add("p", "g", Tensor<double>({2}, 0.0));
  p.grad()[0] = 3;
  p.grad()[1] = 4;
  EXPECT_DOUBLE_EQ(nn::clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(nn::grad_norm(store), 1.0, 1e-12);
}

}  // namespace
}  // namespace cnc
