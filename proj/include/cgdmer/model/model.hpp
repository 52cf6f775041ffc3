#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/ecg/mae.hpp"
#include "cgdmer/model/align.hpp"
#include "cgdmer/model/disentangle.hpp"
#include "cgdmer/text/mae.hpp"

namespace cgdmer::model {

struct ModelConfig {
  ecg::EcgConfig ecg;
  text::TextConfig text;
  std::size_t d_proj = 128;

  void validate() const {
    ecg.validate();
    text.validate();
    if (ecg.encoder.model_dim != text.encoder.model_dim) {
      throw std::invalid_argument("model: ecg width " + std::to_string(ecg.encoder.model_dim) +
                                  " differs from text width " + std::to_string(text.encoder.model_dim));
    }
    if (d_proj == 0) throw std::invalid_argument("model: d_proj must be positive");
  }
};

/// Parameter count implied by the configured dimensions, computed from the
/// layer formulas rather than from a constructed registry.
inline std::size_t analytic_param_count(const ModelConfig& c) {
  const std::size_t d = c.ecg.tokenizer.model_dim;
  auto linear = [](std::size_t in, std::size_t out, bool bias = true) { return in * out + (bias ? out : 0); };
  auto attention = [&](std::size_t w) { return linear(w, w) + linear(w, w, false) + linear(w, w) + linear(w, w); };
  auto block = [&](const nn::TransformerConfig& t, bool cross) {
    const std::size_t w = t.model_dim;
    std::size_t n = 2 * w + attention(w) + 2 * w + linear(w, t.ffn_dim) + linear(t.ffn_dim, w);
    if (cross) n += 2 * w + attention(w);
    return n;
  };
  auto stack = [&](const nn::TransformerConfig& t, bool cross) { return t.layers * block(t, cross); };

  const auto& tk = c.ecg.tokenizer;
  std::size_t n = tk.leads * d + tk.patch_count * d;
  std::size_t in = 1;
  for (std::size_t w : tk.channels()) {
    n += w * in * tk.kernel + 3 * w;
    in = w;
  }
  n += stack(c.ecg.encoder, false) + d + stack(c.ecg.decoder, false) + 2 * d + linear(d, tk.patch_length);

  const std::size_t v = c.text.vocab_size;
  n += v * d + c.text.max_len * d + stack(c.text.encoder, false) + stack(c.text.decoder, true) + 2 * d + linear(d, v);

  n += 4 * (linear(d, d) + linear(d, c.d_proj));
  return n;
}

/// ECG and text masked autoencoders plus the four projection heads, all
/// registered in one parameter store.
template <typename T>
class CgdmerModel {
 public:
  CgdmerModel(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02)
      : cfg_(cfg), store_(std::make_unique<nn::ParamStore<T>>(init_std)) {
    cfg.validate();
    Rng rng(derive_seed(seed, {salt::kInit}));
    ecg_ = ecg::EcgMae<T>(*store_, cfg.ecg, rng);
    text_ = text::TextMae<T>(*store_, cfg.text, rng);
    heads_ = HeadSet<T>(*store_, cfg.ecg.tokenizer.model_dim, cfg.d_proj, rng);
  }

  CgdmerModel(const CgdmerModel&) = delete;
  CgdmerModel& operator=(const CgdmerModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& store() { return *store_; }
  const nn::ParamStore<T>& store() const { return *store_; }
  const ecg::EcgMae<T>& ecg() const { return ecg_; }
  const text::TextMae<T>& text() const { return text_; }
  const HeadSet<T>& heads() const { return heads_; }

  /// Stacks per-sample pooled vectors [d] into [B, d].
  static Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty batch");
    std::vector<Tensor<T>> r;
    r.reserve(rows.size());
    for (const auto& x : rows) r.push_back(reshape(x, {1, x.numel()}));
    return concat(r, 0);
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<nn::ParamStore<T>> store_;
  ecg::EcgMae<T> ecg_;
  text::TextMae<T> text_;
  HeadSet<T> heads_;
};

/// L2-normalized shared embedding, the only path to alignment and zero-shot scores.
template <typename T>
Tensor<T> normalized_shared(const DisentangledPair<T>& p) {
  return l2_normalize(p.shared);
}

}  // namespace cgdmer::model
