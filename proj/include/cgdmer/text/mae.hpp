#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/nn/transformer.hpp"
#include "cgdmer/text/vocab.hpp"

namespace cgdmer::text {

struct TextConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  nn::TransformerConfig encoder{2, 4, 128, 512, 0.0};
  nn::TransformerConfig decoder{2, 4, 128, 512, 0.0};
  double mask_rate = 0.15;

  void validate() const {
    if (vocab_size <= Vocab::kUnk) throw std::invalid_argument("text: vocab_size must exceed the special ids");
    if (max_len < 2) throw std::invalid_argument("text: max_len must be at least 2");
    encoder.validate("text encoder");
    decoder.validate("text decoder");
    if (encoder.model_dim != decoder.model_dim) throw std::invalid_argument("text: encoder/decoder widths differ");
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("text: mask_rate must lie in (0,1)");
  }
};

struct MaskedText {
  std::vector<TokenId> corrupted;         // original length, SENTINEL at masked slots
  std::vector<TokenId> masked_ids;        // truth at masked slots, left to right
  std::vector<std::size_t> masked_positions;
};

inline bool maskable(TokenId id) { return id != Vocab::kPad && id != Vocab::kBos && id != Vocab::kEos; }

/// Masks max(1, round(rate * n_maskable)) positions drawn uniformly without
/// replacement; BOS, EOS and PAD are never masked.
inline MaskedText mask_text(const std::vector<TokenId>& ids, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw std::invalid_argument("mask_text: rate must lie in (0,1)");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (maskable(ids[i])) candidates.push_back(i);
  }
  if (candidates.empty()) throw std::invalid_argument("mask_text: sequence has no maskable token");
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::round(rate * static_cast<double>(candidates.size()))));
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
  }
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());

  MaskedText m;
  m.corrupted = ids;
  m.masked_positions = candidates;
  for (std::size_t p : candidates) {
    m.masked_ids.push_back(ids[p]);
    m.corrupted[p] = Vocab::kSentinel;
  }
  return m;
}

template <typename T>
class TextMae {
 public:
  TextMae() = default;
  TextMae(nn::ParamStore<T>& store, const TextConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.encoder.model_dim;
    token_embedding_ = store.add("text.token_embedding", {cfg.vocab_size, d}, nn::Init::kNormal, rng);
    position_embedding_ = store.add("text.position_embedding", {cfg.max_len, d}, nn::Init::kNormal, rng);
    encoder_ = nn::TransformerStack<T>(store, "text.encoder", cfg.encoder, false, rng);
    decoder_ = nn::TransformerStack<T>(store, "text.decoder", cfg.decoder, true, rng);
    decoder_norm_ = nn::LayerNorm<T>(store, "text.decoder_norm", d, rng);
    head_ = nn::Linear<T>(store, "text.head", d, cfg.vocab_size, rng);
  }

  const TextConfig& config() const { return cfg_; }

  /// Encoder outputs at the non-PAD positions, in sequence order.
  Tensor<T> encode(const std::vector<TokenId>& ids, const nn::ForwardContext& ctx = {}) const {
    check_ids(ids);
    std::vector<std::size_t> tokens, positions;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == Vocab::kPad) continue;
      tokens.push_back(ids[i]);
      positions.push_back(i);
    }
    if (tokens.empty()) throw std::invalid_argument("text encode: sequence is all padding");
    Tensor<T> x = add(index_select(token_embedding_, tokens), index_select(position_embedding_, positions));
    return encoder_(x, nullptr, nullptr, ctx);
  }

  /// Teacher-forced logits [k, V] for the masked tokens of `m`, predicted
  /// left to right. Step i sees BOS and the true tokens at masked slots
  /// before it, the position of its target, and the encoded corrupted text.
  Tensor<T> masked_logits(const MaskedText& m, const nn::ForwardContext& ctx = {}) const {
    const std::size_t k = m.masked_positions.size();
    if (k == 0 || m.masked_ids.size() != k) throw std::invalid_argument("masked_logits: inconsistent MaskedText");
    for (std::size_t p : m.masked_positions) {
      if (p >= m.corrupted.size()) {
        throw std::out_of_range("masked position " + std::to_string(p) + " outside sequence of length " +
                                std::to_string(m.corrupted.size()));
      }
    }
    Tensor<T> memory = encode(m.corrupted, ctx);
    std::vector<std::size_t> inputs{Vocab::kBos};
    inputs.insert(inputs.end(), m.masked_ids.begin(), m.masked_ids.end() - 1);
    Tensor<T> y = add(index_select(token_embedding_, inputs), index_select(position_embedding_, m.masked_positions));
    Tensor<T> causal = nn::causal_mask<T>(k);
    return head_(decoder_norm_(decoder_(y, &causal, &memory, ctx)));
  }

  /// E^text: mean of the encoder outputs at non-PAD positions of the
  /// uncorrupted sequence.
  Tensor<T> pooled_text_representation(const std::vector<TokenId>& ids, const nn::ForwardContext& ctx = {}) const {
    return mean_axis(encode(ids, ctx), 0);
  }

 private:
  void check_ids(const std::vector<TokenId>& ids) const {
    if (ids.empty()) throw std::invalid_argument("text: empty id sequence");
    if (ids.size() > cfg_.max_len) {
      throw std::invalid_argument("text: sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                                  std::to_string(cfg_.max_len));
    }
    for (TokenId id : ids) {
      if (id >= cfg_.vocab_size) throw std::out_of_range("text: token id " + std::to_string(id) + " outside vocab");
    }
  }

  TextConfig cfg_;
  Tensor<T> token_embedding_, position_embedding_;
  nn::TransformerStack<T> encoder_, decoder_;
  nn::LayerNorm<T> decoder_norm_;
  nn::Linear<T> head_;
};

/// -(1/B) sum_j (1/|M_j|) sum_m log P(t_m | ...), from per-sample logits [k_j, V].
template <typename T>
Tensor<T> loss_t_rec(const std::vector<Tensor<T>>& logits, const std::vector<std::vector<TokenId>>& targets) {
  if (logits.empty()) throw std::invalid_argument("loss_t_rec: empty batch");
  if (logits.size() != targets.size()) throw std::invalid_argument("loss_t_rec: logits/targets batch sizes differ");
  Tensor<T> total;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j].rank() != 2 || logits[j].dim(0) != targets[j].size()) {
      throw ShapeError("loss_t_rec: sample " + std::to_string(j) + " logits " + shape_str(logits[j].shape()) +
                       " vs " + std::to_string(targets[j].size()) + " targets");
    }
    Tensor<T> s = mean(softmax_cross_entropy(logits[j], targets[j]));
    total = j == 0 ? s : add(total, s);
  }
  return scale(total, T(1) / static_cast<T>(logits.size()));
}

template <typename T>
Tensor<T> loss_t_rec(const TextMae<T>& model, const std::vector<MaskedText>& batch, const nn::ForwardContext& ctx = {}) {
  std::vector<Tensor<T>> logits;
  std::vector<std::vector<TokenId>> targets;
  for (const auto& m : batch) {
    logits.push_back(model.masked_logits(m, ctx));
    targets.push_back(m.masked_ids);
  }
  return loss_t_rec(logits, targets);
}

}  // namespace cgdmer::text
