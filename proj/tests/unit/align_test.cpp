#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cgdmer/model/align.hpp"
#include "cgdmer/model/disentangle.hpp"
#include "cgdmer/numerics/grad_check.hpp"
#include "cgdmer/numerics/optim.hpp"

namespace cgdmer::model {
namespace {

using D = Tensor<double>;
const double kLn2 = std::numbers::ln2;

D randn(Rng& rng, Shape s, bool leaf = true) {
  std::normal_distribution<double> g;
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = g(rng);
  return D::from(std::move(s), std::move(v), leaf);
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double cos_oracle(const double* a, const double* b, std::size_t n) {
  const double na = std::sqrt(dot(a, a, n)), nb = std::sqrt(dot(b, b, n));
  if (na < 1e-8 || nb < 1e-8) return 0.0;
  return dot(a, b, n) / (na * nb);
}

// ---- heads ----------------------------------------------------------------

TEST(Heads, ZeroFinalLayerGivesZero) {
  nn::ParamStore<double> store(0.5);
  Rng rng(1);
  HeadSet<double> heads(store, 4, 3, rng);
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.names()[i].find(".fc2.") != std::string::npos) {
      auto v = store.tensors()[i].mutable_data();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
  for (auto m : {Modality::kEcg, Modality::kText}) {
    auto p = heads.project(randn(rng, {2, 4}, false), m);
    for (double x : p.specific.values()) EXPECT_EQ(x, 0.0);
    for (double x : p.shared.values()) EXPECT_EQ(x, 0.0);
  }
}

TEST(Heads, DistinctInputsAndHeadsDiffer) {
  nn::ParamStore<double> store(0.5);
  Rng rng(2);
  HeadSet<double> heads(store, 4, 3, rng);
  EXPECT_EQ(store.size(), 4u * 4u);  // four MLPs, two linear layers each, weight+bias
  auto a = heads.project(randn(rng, {1, 4}, false), Modality::kEcg);
  auto b = heads.project(randn(rng, {1, 4}, false), Modality::kEcg);
  EXPECT_NE(a.shared.values(), b.shared.values());
  EXPECT_NE(a.shared.values(), a.specific.values());
}

TEST(Heads, MatchesScalarTwoLayerOracle) {
  nn::ParamStore<double> store(0.7);
  Rng rng(3);
  HeadSet<double> heads(store, 3, 3, rng);
  // give the biases nonzero values so they are exercised
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.names()[i].ends_with(".bias")) {
      auto v = store.tensors()[i].mutable_data();
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = 0.1 * double(k + 1);
    }
  }
  const std::vector<double> x{0.4, -1.3, 0.8};
  auto out = heads.project(D::from({3}, x), Modality::kText).shared.values();
  auto W1 = store.at("heads.text_shared.fc1.weight").values(), b1 = store.at("heads.text_shared.fc1.bias").values();
  auto W2 = store.at("heads.text_shared.fc2.weight").values(), b2 = store.at("heads.text_shared.fc2.bias").values();
  std::vector<double> h(3);
  for (int j = 0; j < 3; ++j) {
    double z = b1[j];
    for (int i = 0; i < 3; ++i) z += x[i] * W1[i * 3 + j];
    h[j] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
  }
  for (int j = 0; j < 3; ++j) {
    double y = b2[j];
    for (int i = 0; i < 3; ++i) y += h[i] * W2[i * 3 + j];
    EXPECT_NEAR(out[j], y, 1e-12);
  }
}

TEST(Heads, RejectsWrongWidth) {
  nn::ParamStore<double> store;
  Rng rng(1);
  HeadSet<double> heads(store, 4, 3, rng);
  EXPECT_THROW(heads.project(D::zeros({2, 5}), Modality::kEcg), ShapeError);
}

// ---- orthogonality --------------------------------------------------------

DisentangledPair<double> pair_of(std::vector<double> sp, std::vector<double> sh, std::size_t b, Modality m) {
  const std::size_t d = sp.size() / b;
  return {D::from({b, d}, std::move(sp)), D::from({b, d}, std::move(sh)), m};
}

TEST(LossOrth, PerpendicularIsZero) {
  auto e = pair_of({1, 0, 0}, {0, 2, 0}, 1, Modality::kEcg);
  auto t = pair_of({0, 0, 3}, {1, 1, 0}, 1, Modality::kText);
  EXPECT_NEAR(loss_orth(e, t).item(), 0.0, 1e-15);
}

TEST(LossOrth, IdenticalIsTwo) {
  auto e = pair_of({0.6, 0.8}, {0.6, 0.8}, 1, Modality::kEcg);
  auto t = pair_of({1, 0}, {1, 0}, 1, Modality::kText);
  EXPECT_NEAR(loss_orth(e, t).item(), 2.0, 1e-12);
}

TEST(LossOrth, MatchesScalarOracle) {
  Rng rng(5);
  const std::size_t B = 2, d = 4;
  D esp = randn(rng, {B, d}), esh = randn(rng, {B, d}), tsp = randn(rng, {B, d}), tsh = randn(rng, {B, d});
  double oracle = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const double ct = cos_oracle(tsp.data().data() + i * d, tsh.data().data() + i * d, d);
    const double ce = cos_oracle(esp.data().data() + i * d, esh.data().data() + i * d, d);
    oracle += ct * ct + ce * ce;
  }
  oracle /= B;
  EXPECT_NEAR(loss_orth<double>({esp, esh, Modality::kEcg}, {tsp, tsh, Modality::kText}).item(), oracle, 1e-12);
}

TEST(LossOrth, BoundedAndScaleInvariant) {
  Rng rng(6);
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 3, d = 5;
    D a = randn(rng, {B, d}), b = randn(rng, {B, d}), c = randn(rng, {B, d}), e = randn(rng, {B, d});
    const double l = loss_orth<double>({a, b, Modality::kEcg}, {c, e, Modality::kText}).item();
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
    const double k1 = pos(rng), k2 = pos(rng);
    const double scaled =
        loss_orth<double>({scale(a, k1), b, Modality::kEcg}, {c, scale(e, k2), Modality::kText}).item();
    EXPECT_NEAR(scaled, l, 1e-12);
  }
}

TEST(LossOrth, NearZeroVectorCountsAsOrthogonal) {
  auto e = pair_of({1e-10, 0}, {1, 0}, 1, Modality::kEcg);
  auto t = pair_of({1, 0}, {0, 1}, 1, Modality::kText);
  EXPECT_EQ(loss_orth(e, t).item(), 0.0);
}

TEST(LossOrth, GradCheckThroughHeads) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    nn::ParamStore<double> store(0.5);
    Rng rng(seed);
    HeadSet<double> heads(store, 4, 4, rng);
    D ee = randn(rng, {2, 4}), te = randn(rng, {2, 4});
    auto leaves = store.tensors();
    leaves.push_back(ee);
    leaves.push_back(te);
    auto res = grad_check(
        [&] { return loss_orth(heads.project(ee, Modality::kEcg), heads.project(te, Modality::kText)); }, leaves);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
  }
}

// ---- SigLIP ---------------------------------------------------------------

TEST(LossSiglip, ZeroEmbeddingsGiveTwoLn2) {
  EXPECT_NEAR(loss_siglip(D::zeros({2, 3}), D::zeros({2, 3})).item(), 2 * kLn2, 1e-12);
}

TEST(LossSiglip, SingleOrthogonalPairGivesLn2) {
  EXPECT_NEAR(loss_siglip(D::from({1, 2}, {1, 0}), D::from({1, 2}, {0, 1})).item(), kLn2, 1e-12);
}

TEST(LossSiglip, MatchesDoubleLoopOracle) {
  Rng rng(7);
  const std::size_t B = 3, d = 4;
  D e = l2_normalize(randn(rng, {B, d})), t = l2_normalize(randn(rng, {B, d}));
  double oracle = 0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      const double y = i == j ? 1.0 : -1.0;
      const double s = dot(e.data().data() + i * d, t.data().data() + j * d, d);
      oracle += std::log(1.0 / (1.0 + std::exp(-y * s)));
    }
  oracle = -oracle / B;
  EXPECT_NEAR(loss_siglip(e, t).item(), oracle, 1e-12);
}

TEST(LossSiglip, RejectsBatchMismatch) {
  EXPECT_THROW(loss_siglip(D::zeros({2, 3}), D::zeros({3, 3})), ShapeError);
}

TEST(LossSiglip, DecreasesMonotonicallyWhenOptimized) {
  Rng rng(8);
  D e = randn(rng, {4, 6}), t = randn(rng, {4, 6});
  std::vector<D> params{e, t};
  AdamWConfig cfg;
  cfg.lr_max = cfg.lr_min = 1e-2;
  cfg.weight_decay = 0.0;
  cfg.total_steps = 100;
  OptimizerState<double> opt(cfg, params);
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 100; ++step) {
    for (auto& p : params) p.zero_grad();
    D loss = loss_siglip(l2_normalize(e), l2_normalize(t));
    const double v = loss.item();
    EXPECT_LT(v, prev) << "step " << step;
    prev = v;
    backward(loss);
    adamw_step(params, opt);
  }
}

// ---- InfoNCE --------------------------------------------------------------

TEST(LossInfoNce, EqualSimilaritiesGiveLn2) {
  AlignConfig cfg;
  EXPECT_NEAR(loss_infonce(D::full({2, 2}, 0.3), cfg).item(), kLn2, 1e-12);
}

TEST(LossInfoNce, SaturatedDiagonalIsNearZero) {
  AlignConfig cfg;
  EXPECT_LT(loss_infonce(D::from({2, 2}, {1, -1, -1, 1}), cfg).item(), 1e-8);
}

TEST(LossInfoNce, LiteralMatchesPrintedFormula) {
  AlignConfig cfg;
  cfg.infonce_mode = InfoNceMode::kLiteral;
  const double s[2][2] = {{0.9, 0.1}, {0.2, 0.8}};
  const double tau = 0.07;
  auto term = [&](bool e2t, int i, int j) {
    auto at = [&](int a, int b) { return e2t ? s[a][b] : s[b][a]; };
    double den = 0;
    for (int k = 0; k < 2; ++k)
      if (k != i) den += std::exp(at(i, k) / tau);
    return -std::log(std::exp(at(i, j) / tau) / den);
  };
  double oracle = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) oracle += term(true, i, j) + term(false, i, j);
  oracle /= 4.0;
  EXPECT_NEAR(loss_infonce(D::from({2, 2}, {0.9, 0.1, 0.2, 0.8}), cfg).item(), oracle, 1e-10);
}

TEST(LossInfoNce, StandardMatchesScalarCrossEntropy) {
  Rng rng(9);
  const std::size_t B = 4;
  D s = randn(rng, {B, B});
  AlignConfig cfg;
  cfg.temperature = 0.5;
  auto sv = s.values();
  double oracle = 0;
  for (std::size_t i = 0; i < B; ++i) {
    double zr = 0, zc = 0;
    for (std::size_t k = 0; k < B; ++k) {
      zr += std::exp(sv[i * B + k] / 0.5);
      zc += std::exp(sv[k * B + i] / 0.5);
    }
    oracle += -(sv[i * B + i] / 0.5 - std::log(zr)) - (sv[i * B + i] / 0.5 - std::log(zc));
  }
  oracle /= 2.0 * B;
  EXPECT_NEAR(loss_infonce(s, cfg).item(), oracle, 1e-12);
}

TEST(LossInfoNce, TransposeGivesSameStandardLoss) {
  Rng rng(10);
  D e = l2_normalize(randn(rng, {5, 3})), t = l2_normalize(randn(rng, {5, 3}));
  D s = similarity_e2t(e, t), st = similarity_e2t(t, e);
  auto a = s.values(), b = transpose(st).values();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  AlignConfig cfg;
  EXPECT_NEAR(loss_infonce(s, cfg).item(), loss_infonce(st, cfg).item(), 1e-12);
}

TEST(LossInfoNce, SingleSampleIsZero) {
  AlignConfig cfg;
  EXPECT_EQ(loss_infonce(D::from({1, 1}, {0.4}), cfg).item(), 0.0);
  cfg.infonce_mode = InfoNceMode::kLiteral;
  EXPECT_THROW(loss_infonce(D::from({1, 1}, {0.4}), cfg), std::invalid_argument);
}

TEST(LossInfoNce, LowerTemperatureHelpsDominantDiagonal) {
  D s = D::from({3, 3}, {0.9, 0.1, -0.2, 0.0, 0.7, 0.3, 0.2, -0.1, 0.8});
  double prev = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 0.5, 0.2, 0.07, 0.03}) {
    AlignConfig cfg;
    cfg.temperature = tau;
    const double l = loss_infonce(s, cfg).item();
    EXPECT_LT(l, prev) << tau;
    prev = l;
  }
}

TEST(LossInfoNce, InvariantToRescalingRawEmbeddings) {
  Rng rng(11);
  std::uniform_real_distribution<double> pos(0.2, 5.0);
  D e = randn(rng, {4, 3}), t = randn(rng, {4, 3});
  AlignConfig cfg;
  const double base = loss_infonce(similarity_e2t(l2_normalize(e), l2_normalize(t)), cfg).item();
  const double k = pos(rng);
  const double scaled =
      loss_infonce(similarity_e2t(l2_normalize(scale(e, k)), l2_normalize(scale(t, k))), cfg).item();
  EXPECT_NEAR(scaled, base, 1e-12);
}

TEST(LossInfoNce, RejectsBadInput) {
  AlignConfig cfg;
  EXPECT_THROW(loss_infonce(D::zeros({2, 3}), cfg), ShapeError);
  cfg.temperature = 0.0;
  EXPECT_THROW(loss_infonce(D::zeros({2, 2}), cfg), std::invalid_argument);
}

TEST(LossInfoNce, GradCheckBothModes) {
  Rng rng(12);
  for (auto mode : {InfoNceMode::kStandard, InfoNceMode::kLiteral}) {
    AlignConfig cfg;
    cfg.infonce_mode = mode;
    cfg.temperature = 0.3;
    D e = randn(rng, {3, 4}), t = randn(rng, {3, 4});
    auto res = grad_check([&] { return loss_infonce(similarity_e2t(l2_normalize(e), l2_normalize(t)), cfg); },
                          std::vector<D>{e, t});
    EXPECT_TRUE(res.passed) << to_string(mode) << " " << res.max_rel_error;
  }
}

// ---- full objective -------------------------------------------------------

TEST(LossFull, ZeroLambdasGiveCons) {
  AlignConfig cfg;
  cfg.lambda0 = cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0.0;
  EXPECT_EQ(loss_full(LossValues{0.5, 0.2, 0.3, 0.1, 0.7}, cfg), 0.7);
}

TEST(LossFull, UnitWeightsSumComponents) {
  AlignConfig cfg;
  LossValues v{0.2, 0.3, 0.1, 0.4, 0.5};
  EXPECT_NEAR(loss_full(v, cfg), 1.5, 1e-15);
  auto s = [](double x) { return D::scalar(x); };
  EXPECT_NEAR(loss_full(s(0.5), s(0.2), s(0.3), s(0.1), s(0.4), cfg).item(), 1.5, 1e-15);
}

TEST(LossFull, MatchesWeightedSumExactly) {
  Rng rng(13);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    AlignConfig cfg;
    cfg.lambda0 = u(rng);
    cfg.lambda1 = u(rng);
    cfg.lambda2 = u(rng);
    cfg.lambda3 = u(rng);
    LossValues v{u(rng), u(rng), u(rng), u(rng), u(rng)};
    const double oracle =
        v.cons + cfg.lambda0 * v.e_rec + cfg.lambda1 * v.t_rec + cfg.lambda2 * v.orth + cfg.lambda3 * v.siglip;
    EXPECT_EQ(loss_full(v, cfg), oracle);
  }
}

TEST(LossFull, RejectsNegativeWeight) {
  AlignConfig cfg;
  cfg.lambda2 = -0.1;
  EXPECT_THROW(loss_full(LossValues{}, cfg), std::invalid_argument);
  EXPECT_THROW(parse_infonce_mode("cosine"), std::invalid_argument);
}

}  // namespace
}  // namespace cgdmer::model
