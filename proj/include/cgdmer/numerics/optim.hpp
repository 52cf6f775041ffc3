#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/numerics/tensor.hpp"

namespace cgdmer {

struct AdamWConfig {
  double lr_max = 2e-4;
  double lr_min = 0.0;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t total_steps = 1;
  std::uint64_t warmup_steps = 0;

  void validate() const {
    if (!(lr_max > 0) || lr_min < 0 || lr_min > lr_max) throw std::invalid_argument("adamw: need 0 <= lr_min <= lr_max, lr_max > 0");
    if (weight_decay < 0) throw std::invalid_argument("adamw: weight_decay must be >= 0");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw std::invalid_argument("adamw: betas must lie in (0,1)");
    if (!(eps > 0)) throw std::invalid_argument("adamw: eps must be > 0");
    if (total_steps == 0) throw std::invalid_argument("adamw: total_steps must be positive");
  }
};

/// Cosine annealing from lr_max at t=0 to lr_min at t=total_steps; steps past
/// the end stay at lr_min. An optional linear warmup never leaves [lr_min, lr_max].
inline double cosine_lr(std::uint64_t t, const AdamWConfig& cfg) {
  if (t >= cfg.total_steps) return cfg.lr_min;
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.total_steps);
  double lr = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
  if (t < cfg.warmup_steps) {
    lr = std::max(cfg.lr_min, lr * static_cast<double>(t + 1) / static_cast<double>(cfg.warmup_steps));
  }
  return lr;
}

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;

  OptimizerState() = default;
  OptimizerState(AdamWConfig cfg, const std::vector<Tensor<T>>& params) : config(cfg) {
    config.validate();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }
};

/// One AdamW update with bias correction. Weight decay is decoupled: it
/// shrinks p by lr*wd*p independently of the moment-based step.
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads, OptimizerState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.m.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].numel();
    if (grads[i].size() != n || state.m[i].size() != n || state.v[i].size() != n) {
      throw ShapeError("adamw_step: parameter " + std::to_string(i) + " has " + std::to_string(n) + " values but grad " +
                       std::to_string(grads[i].size()));
    }
    for (T g : grads[i]) {
      if (!std::isfinite(g)) throw NonFiniteError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }
  const AdamWConfig& c = state.config;
  const double lr = cosine_lr(state.t, c);
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T decay = static_cast<T>(lr * c.weight_decay);
  const T step = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::span<T> p = params[i].mutable_data();
    std::vector<T>& m = state.m[i];
    std::vector<T>& v = state.v[i];
    const std::vector<T>& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= decay * p[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      p[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

/// Convenience overload reading gradients off the parameter tensors.
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state) {
  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adamw_step(params, grads, state);
}

}  // namespace cgdmer
