#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cgdmer/verify/primitive_cases.hpp"
#include "cgdmer/numerics/autograd.hpp"
#include "cgdmer/numerics/grad_check.hpp"
#include "cgdmer/numerics/ops.hpp"
#include "cgdmer/numerics/optim.hpp"

using namespace cgdmer;
using D = Tensor<double>;

namespace {

// Maclaurin series for erf; independent of std::erf.
double erf_series(double x) {
  double term = x, total = x;
  for (int n = 1; n < 60; ++n) {
    term *= -x * x / n;
    total += term / (2 * n + 1);
  }
  return 2.0 / std::sqrt(std::numbers::pi) * total;
}

}  // namespace

TEST(Forward, MatmulIdentity) {
  D a = D::from({2, 2}, {1, 2, 3, 4});
  D eye = D::from({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(matmul(a, eye).values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Forward, GeluExactForm) {
  D x = D::from({3}, {0.0, 1.0, -1.0});
  D y = gelu(x);
  EXPECT_EQ(y[0], 0.0);
  const double oracle = 0.5 * (1.0 + erf_series(1.0 / std::sqrt(2.0)));
  EXPECT_NEAR(oracle, 0.841345, 5e-7);
  EXPECT_NEAR(y[1], oracle, 1e-12);
  // x*Phi(x) - (-x)*Phi(-x) = x*(Phi(x) + Phi(-x)) = x
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const double v = std::uniform_real_distribution<double>(-4, 4)(rng);
    D g = gelu(D::from({2}, {v, -v}));
    EXPECT_NEAR(g[0] - g[1], v, 1e-14);
  }
}

TEST(Forward, ShapeMismatchNamesPrimitiveAndShapes) {
  D a = D::zeros({2, 3}), b = D::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(add(D::zeros({2, 3}), D::zeros({3, 2})), ShapeError);
}

TEST(Forward, NonFiniteInputRejected) {
  EXPECT_THROW(D::from({2}, {1.0, std::nan("")}), NonFiniteError);
  EXPECT_THROW(D::from({1}, {INFINITY}), NonFiniteError);
  EXPECT_THROW(log(D::from({1}, {0.0})), NonFiniteError);
  EXPECT_THROW(exp(D::from({1}, {1000.0})), NonFiniteError);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    D x = verify::random_tensor(rng, {4, 7}, -20, 20, false);
    D y = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < 7; ++i) s += y[r * 7 + i];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Forward, L2NormalizeUnitNorm) {
  Rng rng(4);
  std::uniform_real_distribution<double> mag(-6, 2);
  for (int trial = 0; trial < 50; ++trial) {
    D x = verify::random_tensor(rng, {3, 5}, -1, 1, false);
    D xs = scale(x, std::pow(10.0, mag(rng)));
    D y = l2_normalize(xs);
    for (std::size_t r = 0; r < 3; ++r) {
      double in = 0, s = 0;
      for (std::size_t i = 0; i < 5; ++i) {
        in += xs[r * 5 + i] * xs[r * 5 + i];
        s += y[r * 5 + i] * y[r * 5 + i];
      }
      if (std::sqrt(in) >= 1e-6) EXPECT_NEAR(std::sqrt(s), 1.0, 1e-10);
    }
  }
}

TEST(Forward, DeterministicValues) {
  auto run = [] {
    Rng rng(11);
    D a = verify::random_tensor(rng, {5, 8}, -1, 1, false);
    D b = verify::random_tensor(rng, {8, 3}, -1, 1, false);
    Tensor<float> af = Tensor<float>::from({5, 8}, std::vector<float>(a.data().begin(), a.data().end()));
    Tensor<float> bf = Tensor<float>::from({8, 3}, std::vector<float>(b.data().begin(), b.data().end()));
    return softmax(gelu(matmul(af, bf))).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, SquareSum) {
  D x = D::from({1}, {3.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, CosineSelfSimilarityHasZeroGradient) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    D u = verify::random_tensor(rng, {6});
    backward(cosine_similarity(u, u));
    for (double g : u.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
  }
}

TEST(Backward, SoftmaxCrossEntropyGradient) {
  D logits = D::from({1, 2}, {0.0, 0.0}, true);
  backward(sum(softmax_cross_entropy(logits, {0})));
  EXPECT_NEAR(logits.grad()[0], -0.5, 1e-15);
  EXPECT_NEAR(logits.grad()[1], 0.5, 1e-15);
}

TEST(Backward, NonScalarRootRejected) {
  D x = D::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, LeafOffPathHasZeroGradient) {
  D x = D::from({2}, {1, 2}, true);
  D unused = D::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(unused.grad(), (std::vector<double>{0, 0, 0}));
  EXPECT_FALSE(unused.has_grad());
}

TEST(Backward, FanOutAccumulatesLikeDuplicatedLeaves) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    D x = verify::random_tensor(rng, {4});
    D w1 = verify::random_tensor(rng, {4}, -1, 1, false), w2 = verify::random_tensor(rng, {4}, -1, 1, false);
    // x feeds two consumers
    backward(add(sum(mul(gelu(x), w1)), sum(mul(exp(x), w2))));
    // same function with two independent copies of x
    D x1 = D::from(x.shape(), x.values(), true), x2 = D::from(x.shape(), x.values(), true);
    backward(add(sum(mul(gelu(x1), w1)), sum(mul(exp(x2), w2))));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], x1.grad()[i] + x2.grad()[i], 1e-14);
  }
}

TEST(Backward, ReverseTopologicalOrder) {
  D x = D::from({2}, {1, 2}, true);
  D a = exp(x);
  D b = mul(a, x);
  D root = sum(add(a, b));
  auto order = topological_order(root);
  ASSERT_EQ(order.size(), 5u);
  auto pos = [&](const D& t) { return std::find(order.begin(), order.end(), t.node()) - order.begin(); };
  EXPECT_LT(pos(x), pos(a));
  EXPECT_LT(pos(a), pos(b));
  EXPECT_LT(pos(b), pos(root));
  EXPECT_EQ(order.back(), root.node());
}

TEST(Backward, ConsumedGraphCannotBeReplayed) {
  D x = D::from({2}, {1, 2}, true);
  D y = exp(x);
  backward(sum(y));
  EXPECT_THROW(backward(sum(y)), std::logic_error);
}

TEST(NoGrad, GuardSuppressesRecording) {
  D x = D::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(exp(x).requires_grad());
  }
  EXPECT_TRUE(exp(x).requires_grad());
}

TEST(GradCheck, SquareAtThree) {
  D x = D::from({1}, {3.0}, true);
  auto res = grad_check([&] { return sum(mul(x, x)); }, x, 1e-5, 1e-4);
  EXPECT_TRUE(res.passed);
  EXPECT_NEAR(res.numeric, 6.0, 1e-6);
  EXPECT_DOUBLE_EQ(res.analytic, 6.0);
  EXPECT_LT(res.max_rel_error, 1e-9);
}

TEST(GradCheck, ReportsOffendingCoordinate) {
  // A deliberately wrong backward rule: claims d/dx exp(x) = 2 exp(x).
  D x = D::from({3}, {0.1, 0.2, 0.3}, true);
  auto broken = [&] {
    return sum(detail::unary<double>("bad", x, [](double v) { return v * v; },
                                     [](double v, double) { return v > 0.25 ? 4.0 * v : 2.0 * v; }));
  };
  auto res = grad_check(broken, x);
  EXPECT_FALSE(res.passed);
  EXPECT_EQ(res.worst_index, 2u);
}

class PrimitiveGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradients, TwentyRandomInstances) {
  Rng rng(derive_seed(17, {std::hash<std::string>{}(GetParam())}));
  for (int trial = 0; trial < 20; ++trial) {
    auto c = verify::make_primitive_case(GetParam(), rng);
    auto res = grad_check(c.expression, c.leaves, {});
    EXPECT_TRUE(res.passed) << GetParam() << " trial " << trial << " rel err " << res.max_rel_error << " analytic "
                            << res.analytic << " numeric " << res.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradients, ::testing::ValuesIn(verify::primitive_names()),
                         [](const auto& info) { return info.param; });

TEST(AdamW, DecayOnlyUpdate) {
  AdamWConfig cfg;
  cfg.lr_max = cfg.lr_min = 1e-3;
  cfg.weight_decay = 1e-2;
  std::vector<D> params{D::from({1}, {1.0}, true)};
  OptimizerState<double> state(cfg, params);
  adamw_step(params, {{0.0}}, state);
  EXPECT_NEAR(params[0][0], 0.99999, 1e-15);
  EXPECT_EQ(state.t, 1u);
}

TEST(AdamW, SingleStepMatchesScalarOracle) {
  AdamWConfig cfg;
  cfg.lr_max = cfg.lr_min = 0.1;
  cfg.weight_decay = 0.0;
  std::vector<D> params{D::from({1}, {1.0}, true)};
  OptimizerState<double> state(cfg, params);
  adamw_step(params, {{1.0}}, state);
  // m = 0.1, v = 0.001; bias-corrected both 1 -> step = lr * 1 / (1 + eps)
  const double m_hat = (0.1 * 1.0) / (1 - 0.9), v_hat = (0.001 * 1.0) / (1 - 0.999);
  EXPECT_NEAR(params[0][0], 1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
  EXPECT_NEAR(params[0][0], 0.9, 1e-8);
}

TEST(AdamW, ConstantGradientStepApproachesLearningRate) {
  AdamWConfig cfg;
  cfg.lr_max = cfg.lr_min = 1e-2;
  cfg.weight_decay = 0.0;
  std::vector<D> params{D::from({2}, {0.0, 0.0}, true)};
  OptimizerState<double> state(cfg, params);
  double before = 0;
  for (int i = 0; i < 2000; ++i) {
    before = params[0][0];
    adamw_step(params, {{0.5, -3.0}}, state);
  }
  EXPECT_NEAR(params[0][0] - before, -1e-2, 1e-8);
  EXPECT_GT(params[0][1], 0.0);
}

TEST(AdamW, ShapeMismatchRejected) {
  std::vector<D> params{D::from({2}, {0.0, 0.0}, true)};
  OptimizerState<double> state(AdamWConfig{}, params);
  EXPECT_THROW(adamw_step(params, {{1.0}}, state), ShapeError);
  EXPECT_THROW(adamw_step(params, {{1.0, 2.0}, {1.0}}, state), ShapeError);
  EXPECT_THROW(adamw_step(params, {{1.0, std::nan("")}}, state), NonFiniteError);
}

TEST(CosineLr, Schedule) {
  AdamWConfig cfg;
  cfg.lr_max = 2e-4;
  cfg.lr_min = 0.0;
  cfg.total_steps = 100;
  EXPECT_DOUBLE_EQ(cosine_lr(0, cfg), 2e-4);
  EXPECT_DOUBLE_EQ(cosine_lr(100, cfg), 0.0);
  EXPECT_NEAR(cosine_lr(50, cfg), 1e-4, 1e-18);
  EXPECT_DOUBLE_EQ(cosine_lr(500, cfg), 0.0);
  cfg.lr_min = 1e-5;
  for (std::uint64_t t = 0; t <= 120; ++t) {
    EXPECT_GE(cosine_lr(t, cfg), cfg.lr_min);
    EXPECT_LE(cosine_lr(t, cfg), cfg.lr_max);
  }
}
