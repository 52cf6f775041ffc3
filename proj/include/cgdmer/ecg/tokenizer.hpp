#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/nn/layers.hpp"
#include "cgdmer/numerics/ops.hpp"
#include "cgdmer/numerics/random.hpp"

namespace cgdmer::ecg {

/// L x N grid of non-overlapping temporal patches of length P, lead-major.
template <typename T>
struct PatchGrid {
  std::size_t leads = 0;
  std::size_t patch_count = 0;
  std::size_t patch_length = 0;
  std::vector<T> values;  // [lead][patch][sample]

  std::span<const T> patch(std::size_t lead, std::size_t n) const {
    return std::span<const T>(values).subspan((lead * patch_count + n) * patch_length, patch_length);
  }
  std::size_t token_count() const { return leads * patch_count; }
};

inline std::string divisors_of(std::size_t t) {
  std::string out;
  for (std::size_t d = 1; d <= t; ++d) {
    if (t % d == 0) out += (out.empty() ? "" : ",") + std::to_string(d);
  }
  return out;
}

/// Splits a row-major L x T signal into N patches per lead.
template <typename T, typename In>
PatchGrid<T> patchify(std::span<const In> signal, std::size_t leads, std::size_t length, std::size_t patches) {
  if (signal.size() != leads * length) {
    throw std::invalid_argument("patchify: signal has " + std::to_string(signal.size()) + " samples, expected " +
                                std::to_string(leads) + "x" + std::to_string(length));
  }
  if (patches == 0 || length % patches != 0) {
    throw std::invalid_argument("patchify: T=" + std::to_string(length) + " is not divisible by N=" +
                                std::to_string(patches) + "; valid patch counts: " + divisors_of(length));
  }
  PatchGrid<T> g;
  g.leads = leads;
  g.patch_count = patches;
  g.patch_length = length / patches;
  g.values.resize(signal.size());
  // Lead-major rows already tile into consecutive patches.
  for (std::size_t i = 0; i < signal.size(); ++i) g.values[i] = static_cast<T>(signal[i]);
  return g;
}

template <typename T>
std::vector<T> unpatchify(const PatchGrid<T>& g) {
  return g.values;
}

/// Masked (lead, patch) positions of one sample.
struct MaskSet {
  std::size_t leads = 0;
  std::size_t patch_count = 0;
  double ratio = 0.0;
  std::vector<std::uint8_t> masked;  // flat lead * N + patch

  std::size_t size() const { return std::accumulate(masked.begin(), masked.end(), std::size_t{0}); }
  bool is_masked(std::size_t lead, std::size_t n) const { return masked[lead * patch_count + n] != 0; }

  /// Flat indices in canonical lead-major, time-minor order.
  std::vector<std::size_t> masked_positions() const { return positions(true); }
  std::vector<std::size_t> visible_positions() const { return positions(false); }

  std::vector<std::pair<std::size_t, std::size_t>> indices() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t p : masked_positions()) out.emplace_back(p / patch_count, p % patch_count);
    return out;
  }

  std::size_t count_in_lead(std::size_t lead) const {
    std::size_t c = 0;
    for (std::size_t n = 0; n < patch_count; ++n) c += is_masked(lead, n);
    return c;
  }

 private:
  std::vector<std::size_t> positions(bool want) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < masked.size(); ++i) {
      if ((masked[i] != 0) == want) out.push_back(i);
    }
    return out;
  }
};

/// Patches masked per lead: round(N*r), ties away from zero. Both zero
/// masked and zero visible patches are rejected.
inline std::size_t masked_per_lead(std::size_t patches, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("mask ratio must lie in (0,1), got " + std::to_string(ratio));
  }
  const auto k = static_cast<std::size_t>(std::round(static_cast<double>(patches) * ratio));
  if (k == 0) {
    throw std::invalid_argument("mask ratio " + std::to_string(ratio) + " masks no patch out of N=" +
                                std::to_string(patches));
  }
  if (k >= patches) {
    throw std::invalid_argument("mask ratio " + std::to_string(ratio) + " leaves no visible patch out of N=" +
                                std::to_string(patches));
  }
  return k;
}

/// Samples round(N*r) patches per lead uniformly without replacement, each
/// lead independently. Deterministic in (L, N, r, seed).
inline MaskSet select_mask(std::size_t leads, std::size_t patches, double ratio, std::uint64_t seed) {
  const std::size_t k = masked_per_lead(patches, ratio);
  MaskSet m;
  m.leads = leads;
  m.patch_count = patches;
  m.ratio = ratio;
  m.masked.assign(leads * patches, 0);
  Rng rng(seed);
  std::vector<std::size_t> idx(patches);
  for (std::size_t l = 0; l < leads; ++l) {
    std::iota(idx.begin(), idx.end(), 0);
    // partial Fisher-Yates: the first k slots become the sample
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, patches - 1);
      std::swap(idx[i], idx[pick(rng)]);
      m.masked[l * patches + idx[i]] = 1;
    }
  }
  return m;
}

struct TokenizerConfig {
  std::size_t leads = 12;
  std::size_t patch_count = 50;
  std::size_t patch_length = 20;
  std::size_t model_dim = 128;
  std::size_t conv_depth = 2;
  std::size_t kernel = 5;
  std::size_t groups = 4;

  void validate() const {
    if (conv_depth == 0) throw std::invalid_argument("tokenizer: conv_depth must be >= 1");
    if (kernel % 2 == 0) throw std::invalid_argument("tokenizer: kernel must be odd for same padding");
    if (model_dim % 2 != 0) throw std::invalid_argument("tokenizer: model_dim must be even");
    for (std::size_t c : channels()) {
      if (c % groups != 0) {
        throw std::invalid_argument("tokenizer: channel width " + std::to_string(c) + " not divisible by " +
                                    std::to_string(groups) + " groups");
      }
    }
  }

  /// Output width of each conv layer: d/2 for all but the last, d for the last.
  std::vector<std::size_t> channels() const {
    std::vector<std::size_t> c(conv_depth, model_dim / 2);
    c.back() = model_dim;
    return c;
  }
};

/// Learned lead (spatial) and shared temporal embeddings plus the per-patch
/// conv tokenizer W (conv -> GELU -> group norm per layer, then mean over time).
template <typename T>
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(nn::ParamStore<T>& store, const std::string& name, const TokenizerConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    spatial_ = store.add(name + ".spatial", {cfg.leads, cfg.model_dim}, nn::Init::kNormal, rng);
    temporal_ = store.add(name + ".temporal", {cfg.patch_count, cfg.model_dim}, nn::Init::kNormal, rng);
    std::size_t in = 1;
    auto widths = cfg.channels();
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string p = name + ".conv" + std::to_string(i);
      Layer layer;
      layer.weight = store.add(p + ".weight", {widths[i], in, cfg.kernel}, nn::Init::kNormal, rng);
      layer.bias = store.add(p + ".bias", {widths[i]}, nn::Init::kZeros, rng);
      layer.gamma = store.add(p + ".gn_gamma", {widths[i]}, nn::Init::kOnes, rng);
      layer.beta = store.add(p + ".gn_beta", {widths[i]}, nn::Init::kZeros, rng);
      layers_.push_back(layer);
      in = widths[i];
    }
  }

  const TokenizerConfig& config() const { return cfg_; }
  const Tensor<T>& spatial() const { return spatial_; }
  const Tensor<T>& temporal() const { return temporal_; }

  /// W applied to every patch independently: [L*N, P] constant -> [L*N, d].
  Tensor<T> encode_patches(const PatchGrid<T>& grid) const {
    check(grid);
    Tensor<T> x = Tensor<T>::from({grid.token_count(), 1, grid.patch_length}, grid.values);
    for (const Layer& l : layers_) {
      x = group_norm(gelu(conv1d(x, l.weight, l.bias)), cfg_.groups, l.gamma, l.beta);
    }
    return mean_axis(x, 2);
  }

  /// spa_l + temp_n for every (l, n), lead-major: [L*N, d].
  Tensor<T> positions() const {
    const std::size_t L = cfg_.leads, N = cfg_.patch_count, d = cfg_.model_dim;
    Tensor<T> grid = add(reshape(spatial_, {L, 1, d}), reshape(temporal_, {1, N, d}));
    return reshape(grid, {L * N, d});
  }

  void check(const PatchGrid<T>& grid) const {
    if (grid.leads != cfg_.leads || grid.patch_count != cfg_.patch_count || grid.patch_length != cfg_.patch_length) {
      throw ShapeError("tokenize: grid " + std::to_string(grid.leads) + "x" + std::to_string(grid.patch_count) + "x" +
                       std::to_string(grid.patch_length) + " does not match table " + std::to_string(cfg_.leads) +
                       "x" + std::to_string(cfg_.patch_count) + "x" + std::to_string(cfg_.patch_length));
    }
  }

 private:
  struct Layer {
    Tensor<T> weight, bias, gamma, beta;
  };
  TokenizerConfig cfg_;
  Tensor<T> spatial_, temporal_;
  std::vector<Layer> layers_;
};

/// token[l][n] = temp_n + spa_l + W(Patch^l_n), flattened lead-major to [L*N, d].
template <typename T>
Tensor<T> tokenize(const PatchGrid<T>& grid, const EmbeddingTable<T>& table) {
  return add(table.encode_patches(grid), table.positions());
}

}  // namespace cgdmer::ecg
