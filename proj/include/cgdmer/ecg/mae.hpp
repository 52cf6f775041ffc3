#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/ecg/tokenizer.hpp"
#include "cgdmer/nn/transformer.hpp"

namespace cgdmer::ecg {

struct EcgConfig {
  TokenizerConfig tokenizer;
  nn::TransformerConfig encoder{4, 4, 128, 512, 0.0};
  nn::TransformerConfig decoder{2, 4, 128, 512, 0.0};
  double mask_ratio = 0.75;

  void validate() const {
    tokenizer.validate();
    encoder.validate("ecg encoder");
    decoder.validate("ecg decoder");
    if (encoder.model_dim != tokenizer.model_dim || decoder.model_dim != tokenizer.model_dim) {
      throw std::invalid_argument("ecg: encoder/decoder width must equal tokenizer width");
    }
    masked_per_lead(tokenizer.patch_count, mask_ratio);
  }
};

/// (sample, lead, patch) identity of one reconstructed patch.
struct PatchKey {
  std::size_t sample = 0;
  std::size_t lead = 0;
  std::size_t patch = 0;
  bool operator==(const PatchKey&) const = default;
};

/// Rows of `values` ([n, P]) paired with their keys.
template <typename T>
struct PatchSet {
  Tensor<T> values;
  std::vector<PatchKey> keys;
};

template <typename T>
struct MaskedForwardOutput {
  Tensor<T> visible_encodings;        // [L*N - |M|, d]
  PatchSet<T> reconstructed_patches;  // [|M|, P]
};

/// Ground-truth patches at the masked positions, in canonical order.
template <typename T>
PatchSet<T> masked_targets(const PatchGrid<T>& grid, const MaskSet& mask, std::size_t sample = 0) {
  if (mask.leads != grid.leads || mask.patch_count != grid.patch_count) {
    throw ShapeError("masked_targets: mask does not match patch grid");
  }
  std::vector<T> v;
  std::vector<PatchKey> keys;
  for (std::size_t p : mask.masked_positions()) {
    auto patch = std::span<const T>(grid.values).subspan(p * grid.patch_length, grid.patch_length);
    v.insert(v.end(), patch.begin(), patch.end());
    keys.push_back({sample, p / grid.patch_count, p % grid.patch_count});
  }
  return {Tensor<T>::from({keys.size(), grid.patch_length}, std::move(v)), std::move(keys)};
}

template <typename T>
class EcgMae {
 public:
  EcgMae() = default;
  EcgMae(nn::ParamStore<T>& store, const EcgConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.tokenizer.model_dim;
    table_ = EmbeddingTable<T>(store, "ecg.embed", cfg.tokenizer, rng);
    encoder_ = nn::TransformerStack<T>(store, "ecg.encoder", cfg.encoder, false, rng);
    mask_embedding_ = store.add("ecg.mask_embedding", {1, d}, nn::Init::kNormal, rng);
    decoder_ = nn::TransformerStack<T>(store, "ecg.decoder", cfg.decoder, false, rng);
    decoder_norm_ = nn::LayerNorm<T>(store, "ecg.decoder_norm", d, rng);
    head_ = nn::Linear<T>(store, "ecg.head", d, cfg.tokenizer.patch_length, rng);
  }

  const EcgConfig& config() const { return cfg_; }
  const EmbeddingTable<T>& table() const { return table_; }
  const Tensor<T>& mask_embedding() const { return mask_embedding_; }

  Tensor<T> tokens(const PatchGrid<T>& grid) const { return tokenize(grid, table_); }

  /// Runs the encoder over the unmasked tokens only, lead-major order.
  Tensor<T> encode_visible(const Tensor<T>& tokens, const MaskSet& mask, const nn::ForwardContext& ctx = {},
                           std::vector<Tensor<T>>* attention = nullptr) const {
    check_mask(mask);
    auto visible = mask.visible_positions();
    if (visible.empty()) throw std::invalid_argument("encode_visible: mask leaves no visible token");
    return encoder_(index_select(tokens, visible), nullptr, nullptr, ctx, attention);
  }

  /// Full L*N decoder input: encodings at visible slots, the shared mask
  /// embedding plus spa_l + temp_n at masked slots.
  Tensor<T> decoder_input(const Tensor<T>& visible, const MaskSet& mask) const {
    check_mask(mask);
    auto vis = mask.visible_positions();
    auto msk = mask.masked_positions();
    if (visible.rank() != 2 || visible.dim(0) != vis.size()) {
      throw ShapeError("decode: expected " + std::to_string(vis.size()) + " visible encodings, got " +
                       shape_str(visible.shape()));
    }
    Tensor<T> filler = add(index_select(table_.positions(), msk), mask_embedding_);
    // Stacked rows are [visible..., masked...]; gather them back into grid order.
    std::vector<std::size_t> order(mask.masked.size());
    for (std::size_t i = 0; i < vis.size(); ++i) order[vis[i]] = i;
    for (std::size_t i = 0; i < msk.size(); ++i) order[msk[i]] = vis.size() + i;
    return index_select(concat<T>({visible, filler}, 0), order);
  }

  PatchSet<T> decode_and_reconstruct(const Tensor<T>& visible, const MaskSet& mask, const nn::ForwardContext& ctx = {},
                                     std::size_t sample = 0) const {
    Tensor<T> h = decoder_norm_(decoder_(decoder_input(visible, mask), nullptr, nullptr, ctx));
    auto msk = mask.masked_positions();
    PatchSet<T> out;
    out.values = head_(index_select(h, msk));
    for (std::size_t p : msk) out.keys.push_back({sample, p / mask.patch_count, p % mask.patch_count});
    return out;
  }

  MaskedForwardOutput<T> forward_masked(const PatchGrid<T>& grid, const MaskSet& mask,
                                        const nn::ForwardContext& ctx = {}, std::size_t sample = 0) const {
    return forward_masked_tokens(tokens(grid), mask, ctx, sample);
  }

  /// Same as forward_masked on precomputed tokens(grid), so one tokenizer
  /// graph can feed both the masked and the pooled pass.
  MaskedForwardOutput<T> forward_masked_tokens(const Tensor<T>& tok, const MaskSet& mask,
                                               const nn::ForwardContext& ctx = {}, std::size_t sample = 0) const {
    MaskedForwardOutput<T> out;
    out.visible_encodings = encode_visible(tok, mask, ctx);
    out.reconstructed_patches = decode_and_reconstruct(out.visible_encodings, mask, ctx, sample);
    return out;
  }

  /// E^ecg: mean over all L*N encoder outputs of a mask-free pass.
  Tensor<T> pooled_representation(const PatchGrid<T>& grid, const nn::ForwardContext& ctx = {}) const {
    return pooled_from_tokens(tokens(grid), ctx);
  }

  Tensor<T> pooled_from_tokens(const Tensor<T>& tok, const nn::ForwardContext& ctx = {}) const {
    return mean_axis(encoder_(tok, nullptr, nullptr, ctx), 0);
  }

 private:
  void check_mask(const MaskSet& mask) const {
    if (mask.leads != cfg_.tokenizer.leads || mask.patch_count != cfg_.tokenizer.patch_count) {
      throw ShapeError("ecg mask " + std::to_string(mask.leads) + "x" + std::to_string(mask.patch_count) +
                       " does not match model grid " + std::to_string(cfg_.tokenizer.leads) + "x" +
                       std::to_string(cfg_.tokenizer.patch_count));
    }
  }

  EcgConfig cfg_;
  EmbeddingTable<T> table_;
  nn::TransformerStack<T> encoder_;
  Tensor<T> mask_embedding_;
  nn::TransformerStack<T> decoder_;
  nn::LayerNorm<T> decoder_norm_;
  nn::Linear<T> head_;
};

/// (1/B) sum_j (1/|M_j|) sum_i ||pred - patch||^2, one PatchSet per sample.
/// No division by patch length.
template <typename T>
Tensor<T> loss_e_rec(const std::vector<PatchSet<T>>& predictions, const std::vector<PatchSet<T>>& targets) {
  if (predictions.empty()) throw std::invalid_argument("loss_e_rec: empty batch");
  if (predictions.size() != targets.size()) {
    throw std::invalid_argument("loss_e_rec: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(targets.size()) + " targets");
  }
  std::vector<Tensor<T>> per_sample;
  for (std::size_t j = 0; j < predictions.size(); ++j) {
    const auto& p = predictions[j];
    const auto& t = targets[j];
    if (p.keys != t.keys) throw std::invalid_argument("loss_e_rec: prediction/target keys misaligned in sample " + std::to_string(j));
    if (p.keys.empty()) throw std::invalid_argument("loss_e_rec: sample " + std::to_string(j) + " has no masked patch");
    per_sample.push_back(mean(squared_l2_distance(p.values, t.values)));
  }
  Tensor<T> total = per_sample[0];
  for (std::size_t j = 1; j < per_sample.size(); ++j) total = add(total, per_sample[j]);
  return scale(total, T(1) / static_cast<T>(predictions.size()));
}

}  // namespace cgdmer::ecg
