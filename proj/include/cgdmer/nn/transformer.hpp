#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/nn/layers.hpp"

namespace cgdmer::nn {

struct TransformerConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t model_dim = 128;
  std::size_t ffn_dim = 512;
  double dropout = 0.0;

  void validate(const char* what) const {
    if (heads == 0 || model_dim == 0 || model_dim % heads != 0) {
      throw std::invalid_argument(std::string(what) + ": model_dim " + std::to_string(model_dim) +
                                  " not divisible by heads " + std::to_string(heads));
    }
    if (ffn_dim == 0) throw std::invalid_argument(std::string(what) + ": ffn_dim must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument(std::string(what) + ": dropout must be in [0,1)");
  }
};

/// Additive attention bias that hides future keys: 0 on/below the diagonal.
template <typename T>
Tensor<T> causal_mask(std::size_t n) {
  std::vector<T> m(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = T(-1e9);
  }
  return Tensor<T>::from({n, n}, std::move(m));
}

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : heads_(heads),
        q_(store, name + ".q", d, d, rng),
        // A key bias only shifts each score row by a constant, which softmax
        // cancels; it would be a parameter with identically zero gradient.
        k_(store, name + ".k", d, d, rng, false),
        v_(store, name + ".v", d, d, rng),
        o_(store, name + ".o", d, d, rng) {}

  /// queries: [nq, d], keys/values from `memory`: [nk, d]. `bias` is an
  /// optional additive [nq, nk] term on the scaled scores. When `probs` is
  /// given it receives the [heads, nq, nk] attention weights.
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& memory, const Tensor<T>* bias = nullptr,
                       Tensor<T>* probs = nullptr) const {
    const std::size_t nq = queries.dim(0), nk = memory.dim(0), d = queries.dim(1);
    const std::size_t dk = d / heads_;
    auto split = [&](const Tensor<T>& x, std::size_t n) { return permute(reshape(x, {n, heads_, dk}), {1, 0, 2}); };
    // 1/sqrt(dk) goes on q, which is much smaller than the score matrix.
    Tensor<T> q = split(scale(q_(queries), T(1) / std::sqrt(static_cast<T>(dk))), nq);
    Tensor<T> k = split(k_(memory), nk);
    Tensor<T> v = split(v_(memory), nk);
    Tensor<T> scores = matmul(q, k, false, true);
    if (bias) scores = add(scores, *bias);
    Tensor<T> p = softmax(scores);
    if (probs) *probs = p;
    Tensor<T> ctx = reshape(permute(matmul(p, v), {1, 0, 2}), {nq, d});
    return o_(ctx);
  }

 private:
  std::size_t heads_ = 1;
  Linear<T> q_, k_, v_, o_;
};

/// Pre-norm block: x + SelfAttn(LN(x)) [+ CrossAttn(LN(x), memory)] + FFN(LN(x)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name, const TransformerConfig& cfg, bool cross, Rng& rng)
      : ln_self_(store, name + ".ln_self", cfg.model_dim, rng),
        self_(store, name + ".self_attn", cfg.model_dim, cfg.heads, rng),
        ln_ffn_(store, name + ".ln_ffn", cfg.model_dim, rng),
        ffn_(store, name + ".ffn", cfg.model_dim, cfg.ffn_dim, cfg.model_dim, rng) {
    if (cross) {
      ln_cross_.emplace(store, name + ".ln_cross", cfg.model_dim, rng);
      cross_.emplace(store, name + ".cross_attn", cfg.model_dim, cfg.heads, rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* self_bias, const Tensor<T>* memory,
                       const ForwardContext& ctx, Tensor<T>* probs = nullptr) const {
    Tensor<T> h = ln_self_(x);
    Tensor<T> y = add(x, maybe_dropout(self_(h, h, self_bias, probs), ctx));
    if (cross_) {
      if (!memory) throw std::invalid_argument("transformer block: cross-attention needs a memory sequence");
      y = add(y, maybe_dropout((*cross_)((*ln_cross_)(y), *memory), ctx));
    }
    return add(y, maybe_dropout(ffn_(ln_ffn_(y), ctx), ctx));
  }

 private:
  LayerNorm<T> ln_self_;
  MultiHeadAttention<T> self_;
  std::optional<LayerNorm<T>> ln_cross_;
  std::optional<MultiHeadAttention<T>> cross_;
  LayerNorm<T> ln_ffn_;
  Mlp<T> ffn_;
};

template <typename T>
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(ParamStore<T>& store, const std::string& name, const TransformerConfig& cfg, bool cross, Rng& rng)
      : cfg_(cfg) {
    cfg.validate(name.c_str());
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      blocks_.emplace_back(store, name + "." + std::to_string(i), cfg, cross, rng);
    }
  }

  /// With zero layers the stack is the identity.
  Tensor<T> operator()(Tensor<T> x, const Tensor<T>* self_bias = nullptr, const Tensor<T>* memory = nullptr,
                       const ForwardContext& ctx = {}, std::vector<Tensor<T>>* probs = nullptr) const {
    for (const auto& b : blocks_) {
      Tensor<T> p;
      x = b(x, self_bias, memory, ctx, probs ? &p : nullptr);
      if (probs) probs->push_back(p);
    }
    return x;
  }

  std::size_t layers() const { return blocks_.size(); }
  const TransformerConfig& config() const { return cfg_; }

 private:
  TransformerConfig cfg_;
  std::vector<TransformerBlock<T>> blocks_;
};

}  // namespace cgdmer::nn
