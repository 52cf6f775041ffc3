#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cgdmer/nn/params.hpp"
#include "cgdmer/numerics/ops.hpp"

namespace cgdmer::nn {

/// Dropout source for a forward pass; a null rng (or rate 0) disables it.
struct ForwardContext {
  Rng* rng = nullptr;
  double dropout = 0.0;
};

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ForwardContext& ctx) {
  if (!ctx.rng || ctx.dropout <= 0.0) return x;
  return dropout(x, static_cast<T>(ctx.dropout), *ctx.rng);
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true)
      : weight_(store.add(name + ".weight", {in, out}, Init::kNormal, rng)) {
    if (with_bias) bias_ = store.add(name + ".bias", {out}, Init::kZeros, rng);
  }

  /// x: [n, in] -> [n, out]
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, weight_);
    return bias_.node() ? add(y, bias_) : y;
  }

  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }

 private:
  Tensor<T> weight_, bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t d, Rng& rng)
      : gamma_(store.add(name + ".gamma", {d}, Init::kOnes, rng)),
        beta_(store.add(name + ".beta", {d}, Init::kZeros, rng)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor<T> gamma_, beta_;
};

/// Two-layer perceptron in -> hidden -> out with GELU in between.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : fc1_(store, name + ".fc1", in, hidden, rng), fc2_(store, name + ".fc2", hidden, out, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx = {}) const {
    return fc2_(maybe_dropout(gelu(fc1_(x)), ctx));
  }

  const Linear<T>& fc1() const { return fc1_; }
  const Linear<T>& fc2() const { return fc2_; }

 private:
  Linear<T> fc1_, fc2_;
};

}  // namespace cgdmer::nn
