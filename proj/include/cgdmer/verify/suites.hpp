#pragma once

// The gradcheck and losscheck tables behind the command-line checks and the
// acceptance runner. Every entry compares an implementation against either a
// hand-known value or a scalar loop written independently here.

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cgdmer/ecg/mae.hpp"
#include "cgdmer/eval/evaluate.hpp"
#include "cgdmer/model/align.hpp"
#include "cgdmer/model/disentangle.hpp"
#include "cgdmer/numerics/optim.hpp"
#include "cgdmer/text/mae.hpp"
#include "cgdmer/verify/primitive_cases.hpp"

namespace cgdmer::verify {

inline constexpr double kTrivialTol = 1e-6;
inline constexpr double kDerivedTol = 1e-8;
inline constexpr double kGradTol = 1e-4;

enum class Kind { kTrivial, kDerived, kGradient };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kTrivial: return "analytic";
    case Kind::kDerived: return "oracle";
    default: return "gradient";
  }
}

struct Check {
  std::string name;
  Kind kind = Kind::kTrivial;
  double error = 0;  // abs error, or max rel error for gradients
  double tolerance = 0;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::vector<Check> checks;
  double seconds = 0;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += !c.passed;
    return n;
  }
  void print(std::ostream& os) const {
    for (const auto& c : checks) {
      os << (c.passed ? "ok   " : "FAIL ") << c.name << " [" << kind_name(c.kind) << "] err=" << c.error
         << " tol=" << c.tolerance;
      if (!c.detail.empty()) os << " (" << c.detail << ")";
      os << "\n";
    }
  }
};

namespace detail {

class Recorder {
 public:
  explicit Recorder(SuiteReport& r) : r_(r) {}

  /// Runs `f`, which returns the error to compare against the kind's tolerance.
  void run(const std::string& name, Kind kind, const std::function<double()>& f) {
    const double tol = kind == Kind::kTrivial ? kTrivialTol : kind == Kind::kDerived ? kDerivedTol : kGradTol;
    Check c{name, kind, 0, tol, false, {}};
    try {
      c.error = f();
      c.passed = std::isfinite(c.error) && c.error <= tol;
    } catch (const std::exception& e) {
      c.error = std::numeric_limits<double>::infinity();
      c.detail = std::string("threw: ") + e.what();
    }
    r_.checks.push_back(std::move(c));
  }

 private:
  SuiteReport& r_;
};

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// 0 when `f` throws an exception of type E, else infinity.
template <typename E>
double throws(const std::function<void()>& f) {
  try {
    f();
  } catch (const E&) {
    return 0.0;
  }
  return std::numeric_limits<double>::infinity();
}

inline double flag(bool ok) { return ok ? 0.0 : std::numeric_limits<double>::infinity(); }

inline double erf_series(double x) {
  double term = x, total = x;
  for (int n = 1; n < 60; ++n) {
    term *= -x * x / n;
    total += term / (2 * n + 1);
  }
  return 2.0 / std::sqrt(std::numbers::pi) * total;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double cos_oracle(const double* a, const double* b, std::size_t n) {
  const double na = std::sqrt(dot(a, a, n)), nb = std::sqrt(dot(b, b, n));
  if (na < 1e-8 || nb < 1e-8) return 0.0;
  return dot(a, b, n) / (na * nb);
}

inline D randn(Rng& rng, Shape s, bool leaf = true) {
  std::normal_distribution<double> g;
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = g(rng);
  return D::from(std::move(s), std::move(v), leaf);
}

inline void zero_prefix(nn::ParamStore<double>& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.names()[i].rfind(prefix, 0) == 0) {
      auto v = store.tensors()[i].mutable_data();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
}

inline ecg::EcgConfig tiny_ecg(std::size_t enc_layers) {
  ecg::EcgConfig c;
  c.tokenizer.leads = 2;
  c.tokenizer.patch_count = 4;
  c.tokenizer.patch_length = 3;
  c.tokenizer.model_dim = 8;
  c.encoder = {enc_layers, 2, 8, 16, 0.0};
  c.decoder = {1, 2, 8, 16, 0.0};
  c.mask_ratio = 0.5;
  return c;
}

inline ecg::PatchGrid<double> tiny_grid(const ecg::EcgConfig& c, std::uint64_t seed) {
  const std::size_t T = c.tokenizer.patch_count * c.tokenizer.patch_length;
  Rng rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> sig(c.tokenizer.leads * T);
  for (double& x : sig) x = g(rng);
  return ecg::patchify<double, double>(sig, c.tokenizer.leads, T, c.tokenizer.patch_count);
}

inline double auc_pairs(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] && !y[j]) {
        pairs += 1;
        good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return good / pairs;
}

inline eval::ScoreMatrix one_column(std::vector<double> s, const std::vector<std::uint8_t>& y) {
  eval::ScoreMatrix m;
  m.rows = s.size();
  m.cols = 1;
  m.scores = std::move(s);
  m.labels = y;
  return m;
}

}  // namespace detail

// ---- losscheck ------------------------------------------------------------------

inline void numerics_checks(detail::Recorder& rec) {
  using namespace detail;
  rec.run("matmul identity", Kind::kTrivial, [] {
    return max_abs_diff(matmul(D::from({2, 2}, {1, 2, 3, 4}), D::from({2, 2}, {1, 0, 0, 1})).values(), {1, 2, 3, 4});
  });
  rec.run("gelu(0) = 0 and gelu(x) - gelu(-x) = x", Kind::kTrivial, [] {
    double err = std::abs(gelu(D::from({1}, {0.0}))[0]);
    for (double v : {0.3, 1.0, -2.5, 3.7}) {
      D g = gelu(D::from({2}, {v, -v}));
      err = std::max(err, std::abs(g[0] - g[1] - v));
    }
    return err;
  });
  rec.run("gelu(1) against series erf", Kind::kDerived, [] {
    const double oracle = 0.5 * (1.0 + erf_series(1.0 / std::sqrt(2.0)));
    return std::max(std::abs(gelu(D::from({1}, {1.0}))[0] - oracle), std::abs(oracle - 0.841345) > 5e-7 ? 1.0 : 0.0);
  });
  rec.run("grad of sum(x^2) at 3", Kind::kTrivial, [] {
    D x = D::from({1}, {3.0}, true);
    backward(sum(mul(x, x)));
    return std::abs(x.grad()[0] - 6.0);
  });
  rec.run("grad of cosine(u, u) is zero", Kind::kTrivial, [] {
    Rng rng(5);
    double err = 0;
    for (int t = 0; t < 5; ++t) {
      D u = random_tensor(rng, {6});
      backward(cosine_similarity(u, u));
      for (double g : u.grad()) err = std::max(err, std::abs(g));
    }
    return err;
  });
  rec.run("softmax cross-entropy grad at [0,0]", Kind::kDerived, [] {
    D logits = D::from({1, 2}, {0.0, 0.0}, true);
    backward(sum(softmax_cross_entropy(logits, {0})));
    // softmax - onehot
    const double p = 1.0 / (1.0 + std::exp(0.0));
    return max_abs_diff({logits.grad()[0], logits.grad()[1]}, {p - 1.0, p});
  });
  rec.run("finite difference of x^2 at 3", Kind::kTrivial, [] {
    D x = D::from({1}, {3.0}, true);
    auto r = grad_check([&] { return sum(mul(x, x)); }, x, 1e-5, 1e-4);
    return std::max(r.max_rel_error < 1e-9 ? 0.0 : 1.0, std::abs(r.analytic - 6.0));
  });
  rec.run("adamw decay-only step", Kind::kTrivial, [] {
    AdamWConfig cfg;
    cfg.lr_max = cfg.lr_min = 1e-3;
    cfg.weight_decay = 1e-2;
    std::vector<D> p{D::from({1}, {1.0}, true)};
    OptimizerState<double> st(cfg, p);
    adamw_step(p, {{0.0}}, st);
    return std::abs(p[0][0] - 0.99999);
  });
  rec.run("adamw constant gradient step size", Kind::kTrivial, [] {
    AdamWConfig cfg;
    cfg.lr_max = cfg.lr_min = 1e-2;
    cfg.weight_decay = 0.0;
    std::vector<D> p{D::from({2}, {0.0, 0.0}, true)};
    OptimizerState<double> st(cfg, p);
    double b0 = 0, b1 = 0;
    for (int i = 0; i < 2000; ++i) {
      b0 = p[0][0];
      b1 = p[0][1];
      adamw_step(p, {{0.5, -3.0}}, st);
    }
    return std::max(std::abs(p[0][0] - b0 + 1e-2), std::abs(p[0][1] - b1 - 1e-2));
  });
  rec.run("adamw one step against scalar update", Kind::kDerived, [] {
    AdamWConfig cfg;
    cfg.lr_max = cfg.lr_min = 0.1;
    cfg.weight_decay = 0.0;
    std::vector<D> p{D::from({1}, {1.0}, true)};
    OptimizerState<double> st(cfg, p);
    adamw_step(p, {{1.0}}, st);
    const double m = 0.1 * 1.0, v = 0.001 * 1.0;
    const double m_hat = m / (1 - 0.9), v_hat = v / (1 - 0.999);
    return std::abs(p[0][0] - (1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)));
  });
  rec.run("cosine lr endpoints and midpoint", Kind::kTrivial, [] {
    AdamWConfig cfg;
    cfg.lr_max = 2e-4;
    cfg.lr_min = 0.0;
    cfg.total_steps = 100;
    return max_abs_diff({cosine_lr(0, cfg), cosine_lr(100, cfg), cosine_lr(50, cfg)}, {2e-4, 0.0, 1e-4});
  });
}

inline void ecg_checks(detail::Recorder& rec) {
  using namespace detail;
  using namespace ecg;
  rec.run("patchify one lead", Kind::kTrivial, [] {
    std::vector<double> x{1, 2, 3, 4};
    auto g = patchify<double, double>(x, 1, 4, 2);
    return max_abs_diff(g.values, {1, 2, 3, 4}) + flag(g.patch_length == 2 && g.patch_count == 2);
  });
  rec.run("patchify 12x1000 into 50", Kind::kTrivial, [] {
    std::vector<float> x(12 * 1000, 0.5f);
    auto g = patchify<float, float>(x, 12, 1000, 50);
    return flag(g.token_count() == 600 && g.patch_length == 20);
  });
  rec.run("unpatchify round trip", Kind::kTrivial, [] {
    Rng rng(11);
    std::normal_distribution<float> n;
    std::vector<float> f(3 * 60);
    for (float& v : f) v = n(rng);
    return flag(unpatchify(patchify<float, float>(f, 3, 60, 12)) == f);
  });

  const auto cfg = tiny_ecg(1);
  const std::size_t d = cfg.tokenizer.model_dim, N = cfg.tokenizer.patch_count;
  rec.run("zero tokenizer gives spa + temp", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    Rng rng(1);
    EmbeddingTable<double> table(store, "t", cfg.tokenizer, rng);
    zero_prefix(store, "t.conv");
    auto tok = tokenize(tiny_grid(cfg, 2), table).values();
    auto spa = table.spatial().values(), tmp = table.temporal().values();
    double err = 0;
    for (std::size_t l = 0; l < cfg.tokenizer.leads; ++l)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < d; ++k) err = std::max(err, std::abs(tok[(l * N + n) * d + k] - spa[l * d + k] - tmp[n * d + k]));
    return err;
  });
  rec.run("identical patches differ by embedding terms", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    Rng rng(1);
    EmbeddingTable<double> table(store, "t", cfg.tokenizer, rng);
    PatchGrid<double> g;
    g.leads = cfg.tokenizer.leads;
    g.patch_count = N;
    g.patch_length = cfg.tokenizer.patch_length;
    for (std::size_t i = 0; i < g.token_count(); ++i) g.values.insert(g.values.end(), {0.3, -1.2, 0.7});
    auto tok = tokenize(g, table).values();
    auto spa = table.spatial().values(), tmp = table.temporal().values();
    double err = 0;
    for (std::size_t k = 0; k < d; ++k) {
      err = std::max(err, std::abs(tok[(0 * N + 1) * d + k] - tok[(1 * N + 1) * d + k] - (spa[k] - spa[d + k])));
      err = std::max(err, std::abs(tok[(0 * N + 0) * d + k] - tok[(0 * N + 1) * d + k] - (tmp[k] - tmp[d + k])));
    }
    return err;
  });
  rec.run("mask counts for 12 leads, N=100, r=0.75", Kind::kTrivial, [] {
    auto m = select_mask(12, 100, 0.75, 3);
    bool ok = m.size() == 900;
    for (std::size_t l = 0; l < 12; ++l) ok = ok && m.count_in_lead(l) == 75;
    return flag(ok);
  });
  rec.run("mask ratio leaving nothing visible rejected", Kind::kTrivial, [] {
    return throws<std::invalid_argument>([] { select_mask(2, 4, 0.9, 1); }) +
           throws<std::invalid_argument>([] { select_mask(2, 4, 1.0, 1); });
  });
  rec.run("mask index frequency over 10000 draws", Kind::kTrivial, [] {
    std::vector<int> hits(4, 0);
    for (int s = 0; s < 10000; ++s) {
      auto m = select_mask(1, 4, 0.5, derive_seed(5, {static_cast<std::uint64_t>(s)}));
      for (std::size_t i = 0; i < 4; ++i) hits[i] += m.masked[i];
    }
    double worst = 0;
    for (int h : hits) worst = std::max(worst, std::abs(h / 10000.0 - 0.5));
    return flag(worst <= 0.02);
  });

  auto build = [](std::size_t layers, nn::ParamStore<double>& store) {
    Rng rng(4);
    return EcgMae<double>(store, tiny_ecg(layers), rng);
  };
  rec.run("one visible patch per lead gives L encoder tokens", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto c = tiny_ecg(1);
    c.mask_ratio = 0.75;
    Rng rng(4);
    EcgMae<double> m(store, c, rng);
    return flag(m.encode_visible(m.tokens(tiny_grid(c, 1)), select_mask(2, 4, 0.75, 1)).dim(0) == 2);
  });
  rec.run("zero-layer encoder is identity", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto m = build(0, store);
    auto tok = m.tokens(tiny_grid(tiny_ecg(0), 5));
    auto mask = select_mask(2, 4, 0.5, 9);
    auto enc = m.encode_visible(tok, mask).values();
    auto tv = tok.values();
    auto vis = mask.visible_positions();
    double err = 0;
    for (std::size_t i = 0; i < vis.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) err = std::max(err, std::abs(enc[i * d + k] - tv[vis[i] * d + k]));
    return err;
  });
  rec.run("attention rows sum to one", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto m = build(2, store);
    std::vector<D> probs;
    m.encode_visible(m.tokens(tiny_grid(tiny_ecg(2), 5)), select_mask(2, 4, 0.5, 9), {}, &probs);
    double err = probs.empty() ? 1.0 : 0.0;
    for (const auto& p : probs) {
      const std::size_t nk = p.dim(p.rank() - 1);
      auto v = p.values();
      for (std::size_t r = 0; r < v.size() / nk; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < nk; ++k) s += v[r * nk + k];
        err = std::max(err, std::abs(s - 1.0));
      }
    }
    return err;
  });
  rec.run("mask slots share one embedding", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto m = build(1, store);
    auto mask = select_mask(2, 4, 0.5, 2);
    auto enc = m.encode_visible(m.tokens(tiny_grid(cfg, 6)), mask);
    auto in = m.decoder_input(enc, mask).values();
    auto pos = m.table().positions().values();
    auto emb = m.mask_embedding().values();
    double err = 0;
    for (std::size_t p : mask.masked_positions())
      for (std::size_t k = 0; k < d; ++k) err = std::max(err, std::abs(in[p * d + k] - pos[p * d + k] - emb[k]));
    return err;
  });
  rec.run("decoder output count equals masked count", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto m = build(1, store);
    auto mask = select_mask(2, 4, 0.5, 2);
    auto out = m.forward_masked(tiny_grid(cfg, 6), mask);
    return flag(out.reconstructed_patches.values.dim(0) == mask.size() && out.reconstructed_patches.keys.size() == mask.size());
  });
  rec.run("zero prediction head predicts zero", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto m = build(1, store);
    zero_prefix(store, "ecg.head");
    double err = 0;
    for (double v : m.forward_masked(tiny_grid(cfg, 6), select_mask(2, 4, 0.5, 2)).reconstructed_patches.values.values())
      err = std::max(err, std::abs(v));
    return err;
  });
  rec.run("e_rec zero for exact predictions", Kind::kTrivial, [] {
    PatchSet<double> p{D::from({2, 2}, {1, 2, 3, 4}), {{0, 0, 1}, {0, 1, 0}}};
    return std::abs(loss_e_rec<double>({p}, {p}).item());
  });
  rec.run("e_rec single patch [1,2] vs [1,1]", Kind::kTrivial, [] {
    PatchSet<double> p{D::from({1, 2}, {1, 2}), {{0, 0, 0}}};
    PatchSet<double> t{D::from({1, 2}, {1, 1}), {{0, 0, 0}}};
    return std::abs(loss_e_rec<double>({p}, {t}).item() - 1.0);
  });
  rec.run("e_rec against scalar loop", Kind::kDerived, [] {
    Rng rng(8);
    std::uniform_real_distribution<double> u(-2, 2);
    std::vector<PatchSet<double>> preds, targets;
    const std::size_t P = 3;
    double oracle = 0;
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t m = j == 0 ? 2 : 3;
      std::vector<double> pv(m * P), tv(m * P);
      std::vector<PatchKey> keys;
      for (auto& x : pv) x = u(rng);
      for (auto& x : tv) x = u(rng);
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) {
        keys.push_back({j, i, i});
        for (std::size_t k = 0; k < P; ++k) s += (pv[i * P + k] - tv[i * P + k]) * (pv[i * P + k] - tv[i * P + k]);
      }
      oracle += s / m;
      preds.push_back({D::from({m, P}, pv), keys});
      targets.push_back({D::from({m, P}, tv), keys});
    }
    return std::abs(loss_e_rec(preds, targets).item() - oracle / 2.0);
  });
  rec.run("pooled zero model is position mean", Kind::kTrivial, [&] {
    nn::ParamStore<double> store(0.5);
    auto m = build(0, store);
    zero_prefix(store, "ecg.embed.conv");
    auto pooled = m.pooled_representation(tiny_grid(tiny_ecg(0), 1)).values();
    auto spa = m.table().spatial().values(), tmp = m.table().temporal().values();
    double err = 0;
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0;
      for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t n = 0; n < N; ++n) s += spa[l * d + k] + tmp[n * d + k];
      err = std::max(err, std::abs(pooled[k] - s / (2 * N)));
    }
    return err;
  });
  const std::vector<double> grid{1.0, -2.0, 0.5, 3.0, 0.25, -1.0, -0.5, 4.0, 2.0, 0.0, 1.5, -3.5};
  rec.run("pooling ignores token order", Kind::kTrivial, [&] {
    auto a = mean_axis(D::from({4, 3}, grid), 0).values();
    auto b = mean_axis(index_select(D::from({4, 3}, grid), {2, 0, 3, 1}), 0).values();
    return max_abs_diff(a, b);
  });
  rec.run("pooling against scalar mean on 2x2 grid", Kind::kDerived, [&] {
    std::vector<double> oracle(3, 0.0);
    for (int r = 0; r < 4; ++r)
      for (int k = 0; k < 3; ++k) oracle[k] += grid[r * 3 + k] / 4.0;
    return max_abs_diff(mean_axis(D::from({4, 3}, grid), 0).values(), oracle);
  });
}

inline void text_checks(detail::Recorder& rec) {
  using namespace detail;
  using namespace text;
  rec.run("vocab encodes 'Normal sinus rhythm.'", Kind::kTrivial, [] {
    auto v = Vocab::build({"Normal sinus rhythm."});
    std::vector<TokenId> want{Vocab::kBos, v.id("normal"), v.id("sinus"), v.id("rhythm"), v.id("."), Vocab::kEos};
    return flag(v.encode("Normal sinus rhythm.", 64) == want);
  });
  rec.run("out-of-vocabulary word maps to UNK", Kind::kTrivial, [] {
    auto v = Vocab::build({"sinus rhythm"});
    return flag(v.encode("sinus flutter", 8)[2] == Vocab::kUnk);
  });
  rec.run("decode inverts encode", Kind::kTrivial, [] {
    const std::string s = "Sinus  Tachycardia at 132 bpm; rate   ELEVATED.";
    auto v = Vocab::build({s});
    return flag(v.decode(v.encode(s, 64)) == normalize_text(s));
  });
  auto seq = [](std::size_t n) {
    std::vector<TokenId> ids{Vocab::kBos};
    for (std::size_t i = 0; i < n; ++i) ids.push_back(5 + i % 3);
    ids.push_back(Vocab::kEos);
    return ids;
  };
  rec.run("15% of 20 maskable tokens is 3", Kind::kTrivial, [&] {
    return flag(mask_text(seq(20), 0.15, 1).masked_positions.size() == 3);
  });
  rec.run("at least one token masked", Kind::kTrivial, [&] {
    return flag(mask_text(seq(2), 0.15, 1).masked_positions.size() == 1);
  });
  rec.run("text mask frequency over 10000 seeds", Kind::kTrivial, [&] {
    auto ids = seq(20);
    std::vector<int> hits(ids.size(), 0);
    for (int s = 0; s < 10000; ++s)
      for (std::size_t p : mask_text(ids, 0.15, derive_seed(3, {static_cast<std::uint64_t>(s)})).masked_positions) ++hits[p];
    double worst = 0;
    for (std::size_t p = 1; p <= 20; ++p) worst = std::max(worst, std::abs(hits[p] / 10000.0 - 0.15));
    return flag(worst <= 0.02 && hits[0] == 0);
  });
  rec.run("t_rec uniform logits give ln 16", Kind::kTrivial, [] {
    auto logits = D::from({3, 16}, std::vector<double>(48, 0.25));
    return std::abs(loss_t_rec<double>({logits}, {{1, 7, 15}}).item() - std::log(16.0));
  });
  rec.run("t_rec certain predictions give 0", Kind::kTrivial, [] {
    std::vector<double> v(10, -200.0);
    v[2] = v[9] = 200.0;
    return std::abs(loss_t_rec<double>({D::from({2, 5}, v)}, {{2, 4}}).item());
  });
  rec.run("t_rec against scalar cross-entropy", Kind::kDerived, [] {
    const std::size_t V = 6;
    Rng rng(12);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<std::vector<TokenId>> targets{{3}, {0, 5}};
    std::vector<D> logits;
    double oracle = 0;
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t k = targets[j].size();
      std::vector<double> raw(k * V);
      for (auto& x : raw) x = u(rng);
      double s = 0;
      for (std::size_t m = 0; m < k; ++m) {
        double z = 0;
        for (std::size_t c = 0; c < V; ++c) z += std::exp(raw[m * V + c]);
        s += std::log(z) - raw[m * V + targets[j][m]];
      }
      oracle += s / static_cast<double>(k);
      logits.push_back(D::from({k, V}, raw));
    }
    return std::abs(loss_t_rec(logits, targets).item() - oracle / 2.0);
  });

  TextConfig tc;
  tc.vocab_size = 9;
  tc.max_len = 12;
  tc.encoder = {1, 2, 8, 16, 0.0};
  tc.decoder = {1, 2, 8, 16, 0.0};
  nn::ParamStore<double> store(0.5);
  Rng rng(3);
  TextMae<double> model(store, tc, rng);
  rec.run("single-token pool is its encoding", Kind::kTrivial, [&] {
    std::vector<TokenId> ids{Vocab::kEos};
    return max_abs_diff(model.pooled_text_representation(ids).values(), model.encode(ids).values());
  });
  rec.run("padding leaves pool unchanged", Kind::kTrivial, [&] {
    std::vector<TokenId> ids{1, 5, 6, 7, 2};
    auto a = model.pooled_text_representation(ids).values();
    ids.resize(11, Vocab::kPad);
    return max_abs_diff(a, model.pooled_text_representation(ids).values());
  });
  rec.run("text pool against scalar mean", Kind::kDerived, [&] {
    std::vector<TokenId> ids{1, 8, 2};
    auto enc = model.encode(ids).values();
    std::vector<double> oracle(8, 0.0);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t k = 0; k < 8; ++k) oracle[k] += enc[r * 8 + k];
    for (double& x : oracle) x /= 3.0;
    return max_abs_diff(model.pooled_text_representation(ids).values(), oracle);
  });
}

inline void align_checks(detail::Recorder& rec) {
  using namespace detail;
  using namespace model;
  const double ln2 = std::numbers::ln2;
  rec.run("zero final layer gives zero heads", Kind::kTrivial, [] {
    nn::ParamStore<double> store(0.5);
    Rng rng(1);
    HeadSet<double> heads(store, 4, 3, rng);
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store.names()[i].find(".fc2.") != std::string::npos) {
        auto v = store.tensors()[i].mutable_data();
        std::fill(v.begin(), v.end(), 0.0);
      }
    double err = 0;
    for (auto m : {Modality::kEcg, Modality::kText}) {
      auto p = heads.project(randn(rng, {2, 4}, false), m);
      for (double x : p.specific.values()) err = std::max(err, std::abs(x));
      for (double x : p.shared.values()) err = std::max(err, std::abs(x));
    }
    return err;
  });
  rec.run("distinct inputs give distinct head outputs", Kind::kTrivial, [] {
    nn::ParamStore<double> store(0.5);
    Rng rng(2);
    HeadSet<double> heads(store, 4, 3, rng);
    auto a = heads.project(randn(rng, {1, 4}, false), Modality::kEcg);
    auto b = heads.project(randn(rng, {1, 4}, false), Modality::kEcg);
    return flag(a.shared.values() != b.shared.values());
  });
  rec.run("head against scalar two-layer forward", Kind::kDerived, [] {
    nn::ParamStore<double> store(0.7);
    Rng rng(3);
    HeadSet<double> heads(store, 3, 3, rng);
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store.names()[i].ends_with(".bias")) {
        auto v = store.tensors()[i].mutable_data();
        for (std::size_t k = 0; k < v.size(); ++k) v[k] = 0.1 * double(k + 1);
      }
    const std::vector<double> x{0.4, -1.3, 0.8};
    auto out = heads.project(D::from({3}, x), Modality::kText).shared.values();
    auto W1 = store.at("heads.text_shared.fc1.weight").values(), b1 = store.at("heads.text_shared.fc1.bias").values();
    auto W2 = store.at("heads.text_shared.fc2.weight").values(), b2 = store.at("heads.text_shared.fc2.bias").values();
    std::vector<double> h(3), y(3);
    for (int j = 0; j < 3; ++j) {
      double z = b1[j];
      for (int i = 0; i < 3; ++i) z += x[i] * W1[i * 3 + j];
      h[j] = 0.5 * z * (1.0 + erf_series(z / std::sqrt(2.0)));
    }
    for (int j = 0; j < 3; ++j) {
      y[j] = b2[j];
      for (int i = 0; i < 3; ++i) y[j] += h[i] * W2[i * 3 + j];
    }
    return max_abs_diff(out, y);
  });

  auto pair = [](std::vector<double> sp, std::vector<double> sh, Modality m) {
    const std::size_t dd = sp.size();
    return DisentangledPair<double>{D::from({1, dd}, std::move(sp)), D::from({1, dd}, std::move(sh)), m};
  };
  rec.run("orth of perpendicular pairs is 0", Kind::kTrivial, [&] {
    return std::abs(loss_orth(pair({1, 0, 0}, {0, 2, 0}, Modality::kEcg), pair({0, 0, 3}, {1, 1, 0}, Modality::kText)).item());
  });
  rec.run("orth of identical unit pairs is 2", Kind::kTrivial, [&] {
    return std::abs(loss_orth(pair({0.6, 0.8}, {0.6, 0.8}, Modality::kEcg), pair({1, 0}, {1, 0}, Modality::kText)).item() - 2.0);
  });
  rec.run("orth against scalar cosine-squared loop", Kind::kDerived, [] {
    Rng rng(5);
    const std::size_t B = 2, dd = 4;
    D esp = randn(rng, {B, dd}), esh = randn(rng, {B, dd}), tsp = randn(rng, {B, dd}), tsh = randn(rng, {B, dd});
    auto a = esp.values(), b = esh.values(), c = tsp.values(), e = tsh.values();
    double oracle = 0;
    for (std::size_t i = 0; i < B; ++i) {
      const double ct = cos_oracle(c.data() + i * dd, e.data() + i * dd, dd);
      const double ce = cos_oracle(a.data() + i * dd, b.data() + i * dd, dd);
      oracle += ct * ct + ce * ce;
    }
    return std::abs(loss_orth<double>({esp, esh, Modality::kEcg}, {tsp, tsh, Modality::kText}).item() - oracle / B);
  });
  rec.run("siglip of zero embeddings is 2 ln 2", Kind::kTrivial, [&] {
    return std::abs(loss_siglip(D::zeros({2, 3}), D::zeros({2, 3})).item() - 2 * ln2);
  });
  rec.run("siglip of one orthogonal pair is ln 2", Kind::kTrivial, [&] {
    return std::abs(loss_siglip(D::from({1, 2}, {1, 0}), D::from({1, 2}, {0, 1})).item() - ln2);
  });
  rec.run("siglip against scalar double loop", Kind::kDerived, [] {
    Rng rng(7);
    const std::size_t B = 3, dd = 4;
    D e = l2_normalize(randn(rng, {B, dd})), t = l2_normalize(randn(rng, {B, dd}));
    auto ev = e.values(), tv = t.values();
    double oracle = 0;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j) {
        const double y = i == j ? 1.0 : -1.0;
        oracle += std::log(1.0 / (1.0 + std::exp(-y * dot(ev.data() + i * dd, tv.data() + j * dd, dd))));
      }
    return std::abs(loss_siglip(e, t).item() + oracle / B);
  });
  rec.run("contrastive loss of equal similarities is ln 2", Kind::kTrivial, [&] {
    return std::abs(loss_infonce(D::full({2, 2}, 0.3), AlignConfig{}).item() - ln2);
  });
  rec.run("contrastive loss of saturated diagonal is ~0", Kind::kTrivial, [] {
    return flag(loss_infonce(D::from({2, 2}, {1, -1, -1, 1}), AlignConfig{}).item() < 1e-8);
  });
  rec.run("literal contrastive loss against printed formula", Kind::kDerived, [] {
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
    return std::abs(loss_infonce(D::from({2, 2}, {0.9, 0.1, 0.2, 0.8}), cfg).item() - oracle);
  });
  rec.run("full loss with zero weights equals contrastive", Kind::kTrivial, [] {
    AlignConfig cfg;
    cfg.lambda0 = cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0.0;
    auto s = [](double x) { return D::scalar(x); };
    return std::abs(loss_full(s(0.5), s(0.2), s(0.3), s(0.1), s(0.7), cfg).item() - 0.5);
  });
  rec.run("full loss with unit weights sums components", Kind::kTrivial, [] {
    auto s = [](double x) { return D::scalar(x); };
    return std::abs(loss_full(s(0.5), s(0.2), s(0.3), s(0.1), s(0.4), AlignConfig{}).item() - 1.5);
  });
  rec.run("full loss against scalar weighted sum", Kind::kDerived, [] {
    Rng rng(13);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    double err = 0;
    for (int trial = 0; trial < 20; ++trial) {
      AlignConfig cfg;
      cfg.lambda0 = u(rng);
      cfg.lambda1 = u(rng);
      cfg.lambda2 = u(rng);
      cfg.lambda3 = u(rng);
      LossValues v{u(rng), u(rng), u(rng), u(rng), u(rng)};
      const double oracle = v.cons + cfg.lambda0 * v.e_rec + cfg.lambda1 * v.t_rec + cfg.lambda2 * v.orth + cfg.lambda3 * v.siglip;
      err = std::max(err, std::abs(loss_full(v, cfg) - oracle));
      auto s = [](double x) { return D::scalar(x); };
      err = std::max(err, std::abs(loss_full(s(v.cons), s(v.e_rec), s(v.t_rec), s(v.orth), s(v.siglip), cfg).item() - oracle));
    }
    return err;
  });
}

inline void auc_checks(detail::Recorder& rec) {
  using namespace detail;
  rec.run("perfectly ranked class has AUC 1", Kind::kTrivial, [] {
    return std::abs(eval::macro_auc(one_column({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1})).macro - 1.0);
  });
  rec.run("all-equal scores have AUC 0.5", Kind::kTrivial, [] {
    return std::abs(eval::macro_auc(one_column({0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1})).macro - 0.5);
  });
  rec.run("AUC against pair counting", Kind::kDerived, [] {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<std::uint8_t> y{0, 0, 1, 1};
    double err = std::abs(eval::macro_auc(one_column(s, y)).macro - auc_pairs(s, y)) + std::abs(auc_pairs(s, y) - 0.75);
    Rng rng(31);
    std::uniform_int_distribution<int> q(0, 4);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> r(15);
      std::vector<std::uint8_t> lab(15);
      for (std::size_t i = 0; i < r.size(); ++i) {
        r[i] = q(rng) * 0.25;  // coarse grid forces ties
        lab[i] = i % 3 == 0;
      }
      err = std::max(err, std::abs(eval::macro_auc(one_column(r, lab)).macro - auc_pairs(r, lab)));
    }
    return err;
  });
}

/// Every analytic example and scalar-loop oracle.
inline SuiteReport losscheck() {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport r;
  detail::Recorder rec(r);
  numerics_checks(rec);
  ecg_checks(rec);
  text_checks(rec);
  align_checks(rec);
  auc_checks(rec);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---- gradcheck ------------------------------------------------------------------

namespace detail {

struct LossCase {
  std::function<D()> expression;
  std::vector<D> leaves;
};

inline LossCase e_rec_case(Rng& rng) {
  const std::size_t B = pick(rng, 1, 3), P = pick(rng, 2, 4);
  std::vector<ecg::PatchSet<double>> preds, targets;
  LossCase c;
  for (std::size_t j = 0; j < B; ++j) {
    const std::size_t m = pick(rng, 1, 4);
    std::vector<ecg::PatchKey> keys;
    for (std::size_t i = 0; i < m; ++i) keys.push_back({j, 0, i});
    preds.push_back({random_tensor(rng, {m, P}), keys});
    targets.push_back({random_tensor(rng, {m, P}, -1.5, 1.5, false), keys});
    c.leaves.push_back(preds.back().values);
  }
  c.expression = [preds, targets] { return ecg::loss_e_rec(preds, targets); };
  return c;
}

inline LossCase t_rec_case(Rng& rng) {
  const std::size_t B = pick(rng, 1, 3), V = pick(rng, 3, 8);
  std::vector<D> logits;
  std::vector<std::vector<text::TokenId>> targets;
  for (std::size_t j = 0; j < B; ++j) {
    const std::size_t k = pick(rng, 1, 3);
    logits.push_back(random_tensor(rng, {k, V}, -2, 2));
    std::vector<text::TokenId> t;
    for (std::size_t m = 0; m < k; ++m) t.push_back(static_cast<text::TokenId>(pick(rng, 0, V - 1)));
    targets.push_back(t);
  }
  return {[logits, targets] { return text::loss_t_rec(logits, targets); }, logits};
}

/// Head parameters plus raw [B, 4] inputs for both modalities.
struct HeadFixture {
  std::shared_ptr<nn::ParamStore<double>> store;
  std::shared_ptr<model::HeadSet<double>> heads;
  D ecg, text;
  std::vector<D> leaves() const {
    auto l = store->tensors();
    l.push_back(ecg);
    l.push_back(text);
    return l;
  }
};

inline HeadFixture heads_fixture(Rng& rng, std::size_t B) {
  HeadFixture f;
  f.store = std::make_shared<nn::ParamStore<double>>(0.5);
  f.heads = std::make_shared<model::HeadSet<double>>(*f.store, 4, 4, rng);
  f.ecg = randn(rng, {B, 4});
  f.text = randn(rng, {B, 4});
  return f;
}

inline LossCase orth_case(Rng& rng) {
  auto f = heads_fixture(rng, pick(rng, 1, 3));
  return {[f] {
            return model::loss_orth(f.heads->project(f.ecg, model::Modality::kEcg),
                                    f.heads->project(f.text, model::Modality::kText));
          },
          f.leaves()};
}

inline LossCase siglip_case(Rng& rng) {
  const std::size_t B = pick(rng, 1, 4), d = pick(rng, 2, 5);
  D e = randn(rng, {B, d}), t = randn(rng, {B, d});
  return {[e, t] { return model::loss_siglip(l2_normalize(e), l2_normalize(t)); }, {e, t}};
}

inline LossCase cons_case(Rng& rng) {
  const std::size_t B = pick(rng, 2, 4), d = pick(rng, 2, 5);
  D e = randn(rng, {B, d}), t = randn(rng, {B, d});
  model::AlignConfig cfg;
  cfg.temperature = std::uniform_real_distribution<double>(0.2, 1.0)(rng);
  return {[e, t, cfg] { return model::loss_infonce(model::similarity_e2t(l2_normalize(e), l2_normalize(t)), cfg); },
          {e, t}};
}

/// Heads feed orth, siglip and the contrastive term; reconstruction terms
/// take their own leaves.
inline LossCase full_case(Rng& rng) {
  auto f = heads_fixture(rng, pick(rng, 2, 3));
  auto er = e_rec_case(rng);
  auto tr = t_rec_case(rng);
  model::AlignConfig cfg;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  cfg.lambda0 = u(rng);
  cfg.lambda1 = u(rng);
  cfg.lambda2 = u(rng);
  cfg.lambda3 = u(rng);
  cfg.temperature = std::uniform_real_distribution<double>(0.2, 1.0)(rng);
  LossCase c;
  c.leaves = f.leaves();
  c.leaves.insert(c.leaves.end(), er.leaves.begin(), er.leaves.end());
  c.leaves.insert(c.leaves.end(), tr.leaves.begin(), tr.leaves.end());
  c.expression = [f, er, tr, cfg] {
    auto e = f.heads->project(f.ecg, model::Modality::kEcg);
    auto t = f.heads->project(f.text, model::Modality::kText);
    D esh = l2_normalize(e.shared), tsh = l2_normalize(t.shared);
    return model::loss_full(model::loss_infonce(model::similarity_e2t(esh, tsh), cfg), er.expression(),
                            tr.expression(), model::loss_orth(e, t), model::loss_siglip(esh, tsh), cfg);
  };
  return c;
}

}  // namespace detail

/// Central differences against backward() on `instances` random small
/// problems per primitive and per loss, at 64-bit precision.
inline SuiteReport gradcheck(std::size_t instances = 20, std::uint64_t seed = 17) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport r;
  auto record = [&](const std::string& name, const std::function<detail::LossCase(Rng&)>& make) {
    Rng rng(derive_seed(seed, {std::hash<std::string>{}(name)}));
    Check c{name, Kind::kGradient, 0, kGradTol, true, {}};
    try {
      for (std::size_t i = 0; i < instances; ++i) {
        auto lc = make(rng);
        auto res = grad_check(lc.expression, lc.leaves);
        if (res.max_rel_error > c.error) c.error = res.max_rel_error;
        if (!res.passed && c.passed) {
          c.passed = false;
          c.detail = "instance " + std::to_string(i) + " analytic " + std::to_string(res.analytic) + " numeric " +
                     std::to_string(res.numeric);
        }
      }
    } catch (const std::exception& e) {
      c.passed = false;
      c.error = std::numeric_limits<double>::infinity();
      c.detail = std::string("threw: ") + e.what();
    }
    c.detail = std::to_string(instances) + " instances" + (c.detail.empty() ? "" : ", " + c.detail);
    r.checks.push_back(std::move(c));
  };
  for (const auto& name : primitive_names()) {
    record(name, [&name](Rng& rng) {
      auto pc = make_primitive_case(name, rng);
      return detail::LossCase{pc.expression, pc.leaves};
    });
  }
  record("L_e_rec", detail::e_rec_case);
  record("L_t_rec", detail::t_rec_case);
  record("L_orth", detail::orth_case);
  record("L_SigLIP", detail::siglip_case);
  record("L_Cons", detail::cons_case);
  record("L_Full", detail::full_case);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace cgdmer::verify
