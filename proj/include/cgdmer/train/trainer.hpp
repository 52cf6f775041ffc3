#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/data/corpus.hpp"
#include "cgdmer/model/model.hpp"
#include "cgdmer/numerics/autograd.hpp"
#include "cgdmer/train/config.hpp"

namespace cgdmer::train {

/// One training pair in model-ready form.
template <typename T>
struct Sample {
  std::size_t index = 0;  // position in the dataset file; seeds the per-sample masks
  std::string id;
  std::size_t label = 0;
  ecg::PatchGrid<T> grid;
  std::vector<text::TokenId> ids;
};

template <typename T>
std::vector<Sample<T>> prepare(const std::vector<data::SignalRecord>& records, const std::vector<std::size_t>& indices,
                               const text::Vocab& vocab, const TrainConfig& cfg) {
  std::vector<Sample<T>> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto& r = records.at(i);
    if (r.leads != cfg.leads || r.length != cfg.length) {
      throw ConfigError("record " + r.id + " is " + std::to_string(r.leads) + "x" + std::to_string(r.length) +
                        " but the config expects " + std::to_string(cfg.leads) + "x" + std::to_string(cfg.length));
    }
    Sample<T> s;
    s.index = i;
    s.id = r.id;
    s.label = r.label;
    s.grid = ecg::patchify<T, float>(r.ecg, r.leads, r.length, cfg.patch_count);
    s.ids = vocab.encode(r.report, cfg.text_max_len);
    out.push_back(std::move(s));
  }
  return out;
}

/// Per-batch values of every loss term, in CSV column order.
struct LossReport {
  std::uint64_t step = 0;
  double lr = 0;
  double e_rec = 0, t_rec = 0, orth = 0, siglip = 0, cons = 0, full = 0;
};

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
std::string batch_ids(const std::vector<const Sample<T>*>& batch) {
  std::string s;
  for (const auto* x : batch) s += (s.empty() ? "" : ",") + x->id;
  return s;
}

/// Masks and dropout streams are functions of (seed, step, sample index) only.
struct SampleDraw {
  ecg::MaskSet ecg_mask;
  text::MaskedText text_mask;
};

inline SampleDraw draw_masks(const TrainConfig& cfg, std::uint64_t step, std::size_t index,
                             const std::vector<text::TokenId>& ids) {
  return {ecg::select_mask(cfg.leads, cfg.patch_count, cfg.mask_ratio, derive_seed(cfg.seed, {salt::kEcgMask, step, index})),
          text::mask_text(ids, cfg.text_mask_rate, derive_seed(cfg.seed, {salt::kTextMask, step, index}))};
}

inline Rng dropout_rng(const TrainConfig& cfg, std::uint64_t step, std::size_t index, std::uint64_t stream) {
  return Rng(derive_seed(cfg.seed, {salt::kDropout, step, index, stream}));
}

enum Stream : std::uint64_t { kEcgMasked = 0, kTextMasked = 1, kEcgPooled = 2, kTextPooled = 3 };

template <typename T>
struct HeadLosses {
  Tensor<T> orth, siglip, cons;
};

/// Projection heads, normalization and the three alignment-side losses on
/// stacked pooled representations [B, d].
template <typename T>
HeadLosses<T> head_losses(const model::HeadSet<T>& heads, const Tensor<T>& e_ecg, const Tensor<T>& e_text,
                          const model::AlignConfig& align) {
  auto pe = heads.project(e_ecg, model::Modality::kEcg);
  auto pt = heads.project(e_text, model::Modality::kText);
  Tensor<T> ze = model::normalized_shared(pe), zt = model::normalized_shared(pt);
  return {model::loss_orth(pe, pt), model::loss_siglip(ze, zt), model::loss_infonce(model::similarity_e2t(ze, zt), align)};
}

template <typename T>
struct BatchGraph {
  Tensor<T> e_rec, t_rec, orth, siglip, cons, full;
};

/// Runs fn, turning a non-finite failure into an error that names the term
/// and the batch.
template <typename T, typename Fn>
auto guarded(const char* term, std::uint64_t step, const std::vector<const Sample<T>*>& batch, Fn&& fn) {
  try {
    return fn();
  } catch (const NonFiniteError& e) {
    throw NonFiniteLoss(std::string("non-finite ") + term + " at step " + std::to_string(step) + " (" + e.what() +
                        "); batch ids: " + batch_ids(batch));
  }
}

/// The whole objective as one differentiable graph. Memory grows with B;
/// used for gradient checks and small batches.
template <typename T>
BatchGraph<T> forward_batch(const model::CgdmerModel<T>& m, const std::vector<const Sample<T>*>& batch,
                            const TrainConfig& cfg, std::uint64_t step) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const auto align = cfg.align_config();
  std::vector<ecg::PatchSet<T>> preds, targets;
  std::vector<Tensor<T>> logits, pooled_e, pooled_t;
  std::vector<std::vector<text::TokenId>> words;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const Sample<T>& s = *batch[j];
    auto draw = draw_masks(cfg, step, s.index, s.ids);
    Rng r0 = dropout_rng(cfg, step, s.index, kEcgMasked), r1 = dropout_rng(cfg, step, s.index, kTextMasked);
    Rng r2 = dropout_rng(cfg, step, s.index, kEcgPooled), r3 = dropout_rng(cfg, step, s.index, kTextPooled);
    // The tokenizer has no dropout, so both ECG passes share one token graph.
    Tensor<T> tok = guarded("e_rec", step, batch, [&] { return m.ecg().tokens(s.grid); });
    guarded("e_rec", step, batch, [&] {
      preds.push_back(m.ecg().forward_masked_tokens(tok, draw.ecg_mask, {&r0, cfg.dropout}, j).reconstructed_patches);
      targets.push_back(ecg::masked_targets(s.grid, draw.ecg_mask, j));
      return 0;
    });
    guarded("t_rec", step, batch, [&] {
      logits.push_back(m.text().masked_logits(draw.text_mask, {&r1, cfg.dropout}));
      words.push_back(draw.text_mask.masked_ids);
      return 0;
    });
    guarded("pooled representation", step, batch, [&] {
      pooled_e.push_back(m.ecg().pooled_from_tokens(tok, {&r2, cfg.dropout}));
      pooled_t.push_back(m.text().pooled_text_representation(s.ids, {&r3, cfg.dropout}));
      return 0;
    });
  }
  BatchGraph<T> g;
  g.e_rec = guarded("e_rec", step, batch, [&] { return ecg::loss_e_rec(preds, targets); });
  g.t_rec = guarded("t_rec", step, batch, [&] { return text::loss_t_rec(logits, words); });
  auto h = guarded("alignment", step, batch, [&] {
    return head_losses(m.heads(), model::CgdmerModel<T>::stack_rows(pooled_e), model::CgdmerModel<T>::stack_rows(pooled_t),
                       align);
  });
  g.orth = h.orth;
  g.siglip = h.siglip;
  g.cons = h.cons;
  g.full = model::loss_full(g.cons, g.e_rec, g.t_rec, g.orth, g.siglip, align);
  return g;
}

inline void check_report(const LossReport& r, const std::string& ids) {
  const std::pair<const char*, double> terms[] = {{"e_rec", r.e_rec}, {"t_rec", r.t_rec},   {"orth", r.orth},
                                                  {"siglip", r.siglip}, {"cons", r.cons}, {"full", r.full}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw NonFiniteLoss(std::string("non-finite ") + name + " at step " + std::to_string(r.step) + "; batch ids: " + ids);
    }
  }
}

/// Forward + backward of L_Full, accumulating parameter gradients.
///
/// With grad caching the pooled representations are first computed without a
/// graph, the head-side losses are differentiated with respect to them, and
/// each sample is then replayed with the surrogate <E, dL/dE> plus its share
/// of the reconstruction losses. Peak memory is one sample's graph; the
/// gradient equals the monolithic one up to summation order.
template <typename T>
LossReport accumulate_gradients(const model::CgdmerModel<T>& m, const std::vector<const Sample<T>*>& batch,
                                const TrainConfig& cfg, std::uint64_t step) {
  LossReport rep;
  rep.step = step;
  if (!cfg.grad_cache) {
    BatchGraph<T> g = forward_batch(m, batch, cfg, step);
    rep.e_rec = g.e_rec.item();
    rep.t_rec = g.t_rec.item();
    rep.orth = g.orth.item();
    rep.siglip = g.siglip.item();
    rep.cons = g.cons.item();
    rep.full = g.full.item();
    check_report(rep, batch_ids(batch));
    backward(g.full);
    return rep;
  }

  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const auto align = cfg.align_config();
  const std::size_t b = batch.size(), d = cfg.d;
  std::vector<T> ve, vt;
  {
    NoGradGuard no_grad;
    guarded("pooled representation", step, batch, [&] {
      for (const auto* s : batch) {
        Rng r2 = dropout_rng(cfg, step, s->index, kEcgPooled), r3 = dropout_rng(cfg, step, s->index, kTextPooled);
        auto e = m.ecg().pooled_representation(s->grid, {&r2, cfg.dropout});
        auto t = m.text().pooled_text_representation(s->ids, {&r3, cfg.dropout});
        ve.insert(ve.end(), e.values().begin(), e.values().end());
        vt.insert(vt.end(), t.values().begin(), t.values().end());
      }
      return 0;
    });
  }
  auto e_leaf = Tensor<T>::from({b, d}, std::move(ve), true);
  auto t_leaf = Tensor<T>::from({b, d}, std::move(vt), true);
  auto h = guarded("alignment", step, batch, [&] { return head_losses(m.heads(), e_leaf, t_leaf, align); });
  rep.orth = h.orth.item();
  rep.siglip = h.siglip.item();
  rep.cons = h.cons.item();
  Tensor<T> head_objective = h.cons;
  if (align.lambda2 != 0.0) head_objective = add(head_objective, scale(h.orth, static_cast<T>(align.lambda2)));
  if (align.lambda3 != 0.0) head_objective = add(head_objective, scale(h.siglip, static_cast<T>(align.lambda3)));
  backward(head_objective);
  const std::vector<T> ge = e_leaf.grad(), gt = t_leaf.grad();

  const T w0 = static_cast<T>(align.lambda0 / static_cast<double>(b));
  const T w1 = static_cast<T>(align.lambda1 / static_cast<double>(b));
  double e_sum = 0, t_sum = 0;
  for (std::size_t j = 0; j < b; ++j) {
    const Sample<T>& s = *batch[j];
    auto draw = draw_masks(cfg, step, s.index, s.ids);
    Rng r0 = dropout_rng(cfg, step, s.index, kEcgMasked), r1 = dropout_rng(cfg, step, s.index, kTextMasked);
    Rng r2 = dropout_rng(cfg, step, s.index, kEcgPooled), r3 = dropout_rng(cfg, step, s.index, kTextPooled);
    Tensor<T> tok = guarded("e_rec", step, batch, [&] { return m.ecg().tokens(s.grid); });
    Tensor<T> er = guarded("e_rec", step, batch, [&] {
      auto pred = m.ecg().forward_masked_tokens(tok, draw.ecg_mask, {&r0, cfg.dropout}, j).reconstructed_patches;
      return mean(squared_l2_distance(pred.values, ecg::masked_targets(s.grid, draw.ecg_mask, j).values));
    });
    Tensor<T> tr = guarded("t_rec", step, batch, [&] {
      return mean(softmax_cross_entropy(m.text().masked_logits(draw.text_mask, {&r1, cfg.dropout}),
                                        draw.text_mask.masked_ids));
    });
    e_sum += er.item();
    t_sum += tr.item();
    Tensor<T> surrogate = guarded("pooled representation", step, batch, [&] {
      auto e = m.ecg().pooled_from_tokens(tok, {&r2, cfg.dropout});
      auto t = m.text().pooled_text_representation(s.ids, {&r3, cfg.dropout});
      auto row = [&](const std::vector<T>& g) {
        return Tensor<T>::from({d}, std::vector<T>(g.begin() + j * d, g.begin() + (j + 1) * d));
      };
      return add(sum(mul(e, row(ge))), sum(mul(t, row(gt))));
    });
    if (w0 != T(0)) surrogate = add(surrogate, scale(er, w0));
    if (w1 != T(0)) surrogate = add(surrogate, scale(tr, w1));
    backward(surrogate);
  }
  rep.e_rec = e_sum / static_cast<double>(b);
  rep.t_rec = t_sum / static_cast<double>(b);
  rep.full = model::loss_full({rep.e_rec, rep.t_rec, rep.orth, rep.siglip, rep.cons}, align);
  check_report(rep, batch_ids(batch));
  return rep;
}

/// Everything that evolves during pretraining.
template <typename T>
struct TrainState {
  TrainConfig config;
  text::Vocab vocab;
  std::size_t train_size = 0;
  std::unique_ptr<model::CgdmerModel<T>> model;
  OptimizerState<T> optimizer;
  Rng epoch_rng;  // as of the start of the current epoch

  std::uint64_t step() const { return optimizer.t; }
  std::uint64_t batches_per_epoch() const { return (train_size + config.batch_size - 1) / config.batch_size; }
  std::uint64_t total_steps() const { return config.epochs * batches_per_epoch(); }
};

template <typename T>
TrainState<T> init_state(const TrainConfig& cfg, text::Vocab vocab, std::size_t train_size) {
  cfg.validate();
  if (train_size == 0) throw ConfigError("training split is empty");
  TrainState<T> st;
  st.config = cfg;
  st.vocab = std::move(vocab);
  st.train_size = train_size;
  st.model = std::make_unique<model::CgdmerModel<T>>(cfg.model_config(st.vocab.size()), cfg.seed);
  st.optimizer = OptimizerState<T>(cfg.adamw_config(st.total_steps()), st.model->store().tensors());
  st.epoch_rng = Rng(derive_seed(cfg.seed, {salt::kShuffle}));
  return st;
}

template <typename T>
double global_grad_norm(const std::vector<std::vector<T>>& grads) {
  double s = 0;
  for (const auto& g : grads)
    for (T x : g) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

/// One optimization step on `batch`: gradients of L_Full, optional global-norm
/// clipping, AdamW at the cosine-annealed rate.
template <typename T>
LossReport train_step(TrainState<T>& st, const std::vector<const Sample<T>*>& batch) {
  auto& store = st.model->store();
  store.zero_grad();
  LossReport rep = accumulate_gradients(*st.model, batch, st.config, st.step());
  rep.lr = cosine_lr(st.step(), st.optimizer.config);
  std::vector<std::vector<T>> grads;
  grads.reserve(store.size());
  for (const auto& p : store.tensors()) grads.push_back(p.grad());
  if (st.config.grad_clip > 0) {
    const double norm = global_grad_norm(grads);
    if (norm > st.config.grad_clip) {
      const T f = static_cast<T>(st.config.grad_clip / norm);
      for (auto& g : grads)
        for (T& x : g) x *= f;
    }
  }
  adamw_step(store.tensors(), grads, st.optimizer);
  store.zero_grad();
  return rep;
}

/// Fisher-Yates order of [0, n) drawn from rng.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(p[i - 1], p[pick(rng)]);
  }
  return p;
}

struct TrainHooks {
  std::function<void(const LossReport&)> on_step;
  /// Called after the last step of an epoch with the epoch index (0-based).
  std::function<void(std::uint64_t)> on_epoch_end;
  /// Called when a periodic checkpoint is due (train.checkpoint_every).
  std::function<void()> on_checkpoint;
};

/// Trains until `stop_step` (or the configured total) from whatever step the
/// state is at. Batch order is a fresh permutation per epoch; a state resumed
/// mid-epoch regenerates the same permutation from epoch_rng.
template <typename T>
void run_training(TrainState<T>& st, const std::vector<Sample<T>>& data, const TrainHooks& hooks = {},
                  std::uint64_t stop_step = ~std::uint64_t(0)) {
  if (data.size() != st.train_size) {
    throw ConfigError("training data has " + std::to_string(data.size()) + " samples, state expects " +
                      std::to_string(st.train_size));
  }
  const std::uint64_t bpe = st.batches_per_epoch();
  const std::uint64_t end = std::min(stop_step, st.total_steps());
  const std::size_t bs = st.config.batch_size;
  while (st.step() < end) {
    Rng after = st.epoch_rng;
    const auto order = permutation(data.size(), after);
    for (std::uint64_t pos = st.step() % bpe; pos < bpe && st.step() < end; ++pos) {
      std::vector<const Sample<T>*> batch;
      for (std::size_t i = pos * bs; i < std::min(data.size(), (pos + 1) * bs); ++i) batch.push_back(&data[order[i]]);
      LossReport rep = train_step(st, batch);
      if (pos + 1 == bpe) st.epoch_rng = after;
      if (hooks.on_step) hooks.on_step(rep);
      if (pos + 1 == bpe && hooks.on_epoch_end) hooks.on_epoch_end(st.step() / bpe - 1);
      if (st.config.checkpoint_every && st.step() % st.config.checkpoint_every == 0 && hooks.on_checkpoint) {
        hooks.on_checkpoint();
      }
    }
  }
}

inline const char* kMetricsHeader = "step,lr,e_rec,t_rec,orth,siglip,cons,full";

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string metrics_row(const LossReport& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.lr, r.e_rec, r.t_rec, r.orth, r.siglip, r.cons, r.full}) s += "," + format_double(v);
  return s;
}

inline LossReport parse_metrics_row(const std::string& line) {
  LossReport r;
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  if (f.size() != 8) throw std::runtime_error("metrics row has " + std::to_string(f.size()) + " fields: " + line);
  double* out[] = {&r.lr, &r.e_rec, &r.t_rec, &r.orth, &r.siglip, &r.cons, &r.full};
  auto bad = [&] { throw std::runtime_error("malformed metrics row: " + line); };
  if (std::from_chars(f[0].data(), f[0].data() + f[0].size(), r.step).ec != std::errc()) bad();
  for (int i = 0; i < 7; ++i) {
    if (std::from_chars(f[i + 1].data(), f[i + 1].data() + f[i + 1].size(), *out[i]).ec != std::errc()) bad();
  }
  return r;
}

/// Per-step CSV plus per-epoch JSON summaries. Reopening for a resumed run
/// keeps the rows before the resume step and drops the rest.
class MetricsLog {
 public:
  MetricsLog(std::string csv_path, std::string epoch_path, std::uint64_t resume_step = 0)
      : csv_path_(std::move(csv_path)), epoch_path_(std::move(epoch_path)) {
    if (resume_step > 0) {
      std::ifstream in(csv_path_);
      std::string line;
      if (!in || !std::getline(in, line) || line != kMetricsHeader) {
        throw std::runtime_error("cannot resume metrics: " + csv_path_ + " missing or has a different header");
      }
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto r = parse_metrics_row(line);
        if (r.step < resume_step) rows_.push_back(r);
      }
      if (rows_.size() != resume_step) {
        throw std::runtime_error("cannot resume metrics: " + csv_path_ + " has " + std::to_string(rows_.size()) +
                                 " rows before step " + std::to_string(resume_step));
      }
    }
    std::ofstream out(csv_path_, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + csv_path_);
    out << kMetricsHeader << '\n';
    for (const auto& r : rows_) out << metrics_row(r) << '\n';
    csv_.open(csv_path_, std::ios::app);
  }

  void append(const LossReport& r) {
    rows_.push_back(r);
    csv_ << metrics_row(r) << '\n';
    csv_.flush();
  }

  /// Writes the mean of every loss over the steps of each completed epoch.
  void write_epochs(std::uint64_t batches_per_epoch) const {
    json arr = json::array();
    for (std::size_t e = 0; (e + 1) * batches_per_epoch <= rows_.size(); ++e) {
      LossReport m;
      for (std::size_t i = e * batches_per_epoch; i < (e + 1) * batches_per_epoch; ++i) {
        const auto& r = rows_[i];
        m.e_rec += r.e_rec, m.t_rec += r.t_rec, m.orth += r.orth, m.siglip += r.siglip, m.cons += r.cons, m.full += r.full;
      }
      const double n = static_cast<double>(batches_per_epoch);
      arr.push_back({{"epoch", e + 1},
                     {"steps", batches_per_epoch},
                     {"e_rec", m.e_rec / n},
                     {"t_rec", m.t_rec / n},
                     {"orth", m.orth / n},
                     {"siglip", m.siglip / n},
                     {"cons", m.cons / n},
                     {"full", m.full / n}});
    }
    std::ofstream out(epoch_path_, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + epoch_path_);
    out << arr.dump(2) << '\n';
  }

  const std::vector<LossReport>& rows() const { return rows_; }

 private:
  std::string csv_path_, epoch_path_;
  std::ofstream csv_;
  std::vector<LossReport> rows_;
};

}  // namespace cgdmer::train
