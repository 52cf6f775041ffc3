#pragma once

#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgdmer/numerics/ops.hpp"

namespace cgdmer::model {

enum class InfoNceMode { kStandard, kLiteral };

inline std::string to_string(InfoNceMode m) { return m == InfoNceMode::kStandard ? "standard" : "literal"; }

inline InfoNceMode parse_infonce_mode(const std::string& s) {
  if (s == "standard") return InfoNceMode::kStandard;
  if (s == "literal") return InfoNceMode::kLiteral;
  throw std::invalid_argument("infonce_mode must be 'standard' or 'literal', got '" + s + "'");
}

struct AlignConfig {
  double temperature = 0.07;
  double lambda0 = 1.0;  // e_rec
  double lambda1 = 1.0;  // t_rec
  double lambda2 = 1.0;  // orth
  double lambda3 = 1.0;  // siglip
  InfoNceMode infonce_mode = InfoNceMode::kStandard;

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw std::invalid_argument("temperature must be positive, got " + std::to_string(temperature));
    }
    const double l[] = {lambda0, lambda1, lambda2, lambda3};
    for (int i = 0; i < 4; ++i) {
      if (!(l[i] >= 0.0) || !std::isfinite(l[i])) {
        throw std::invalid_argument("lambda" + std::to_string(i) + " must be a nonnegative finite number, got " +
                                    std::to_string(l[i]));
      }
    }
  }
};

/// s^{e2t}[i][j] = <h_ecg_i, h_text_j> for row-normalized [B, d] inputs.
template <typename T>
Tensor<T> similarity_e2t(const Tensor<T>& ecg_shared, const Tensor<T>& text_shared) {
  if (ecg_shared.rank() != 2 || ecg_shared.shape() != text_shared.shape()) {
    shape_fail("similarity", ecg_shared.shape(), text_shared.shape());
  }
  return matmul(ecg_shared, text_shared, false, true);
}

/// -(1/B) sum_ij log sigmoid(y_ij <h_ecg_i, h_text_j>), y = +1 on the diagonal, -1 elsewhere.
/// No temperature or bias; inputs are expected to be normalized already.
template <typename T>
Tensor<T> loss_siglip(const Tensor<T>& ecg_shared, const Tensor<T>& text_shared) {
  if (ecg_shared.rank() != 2 || text_shared.rank() != 2 || ecg_shared.dim(0) != text_shared.dim(0)) {
    shape_fail("loss_siglip", ecg_shared.shape(), text_shared.shape());
  }
  const std::size_t b = ecg_shared.dim(0);
  std::vector<T> y(b * b, T(-1));
  for (std::size_t i = 0; i < b; ++i) y[i * b + i] = T(1);
  Tensor<T> s = similarity_e2t(ecg_shared, text_shared);
  return scale(sum(log_sigmoid(mul(s, Tensor<T>::from({b, b}, std::move(y))))), T(-1) / static_cast<T>(b));
}

namespace detail {
inline std::atomic<bool>& single_sample_warned() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace detail

/// L_Cons from s^{e2t} ([B, B]); s^{t2e} is its transpose.
///
/// standard: symmetric cross-entropy of row-softmax(s / tau) against the
/// diagonal, divided by 2B. B = 1 returns 0 (one class) and warns once.
/// literal:  (1/2B) sum_{i,j} [L^{e2t}_{ij} + L^{t2e}_{ij}] with
/// L_ij = -s_ij / tau + log sum_{k != i} exp(s_ik / tau). Needs B >= 2.
template <typename T>
Tensor<T> loss_infonce(const Tensor<T>& s_e2t, const AlignConfig& cfg) {
  if (s_e2t.rank() != 2 || s_e2t.dim(0) != s_e2t.dim(1)) {
    throw ShapeError("loss_infonce: similarity must be square, got " + shape_str(s_e2t.shape()));
  }
  for (T v : s_e2t.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("loss_infonce: non-finite similarity");
  }
  if (!(cfg.temperature > 0.0)) throw std::invalid_argument("loss_infonce: temperature must be positive");
  const std::size_t b = s_e2t.dim(0);
  const T inv_tau = T(1) / static_cast<T>(cfg.temperature);
  Tensor<T> s_t2e = transpose(s_e2t);

  if (cfg.infonce_mode == InfoNceMode::kStandard) {
    if (b == 1) {
      if (!detail::single_sample_warned().exchange(true)) {
        std::cerr << "warning: contrastive loss with batch size 1 is defined as 0\n";
      }
      return scale(sum(s_e2t), T(0));
    }
    std::vector<std::size_t> diag(b);
    std::iota(diag.begin(), diag.end(), 0);
    Tensor<T> e2t = sum(softmax_cross_entropy(scale(s_e2t, inv_tau), diag));
    Tensor<T> t2e = sum(softmax_cross_entropy(scale(s_t2e, inv_tau), diag));
    return scale(add(e2t, t2e), T(1) / static_cast<T>(2 * b));
  }

  if (b < 2) throw std::invalid_argument("loss_infonce(literal): the k != i denominator is empty for B = 1");
  // exp(-1e4) underflows to exactly 0, removing k = i from the denominator.
  std::vector<T> off(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) off[i * b + i] = T(-1e4);
  Tensor<T> exclude = Tensor<T>::from({b, b}, std::move(off));
  auto direction = [&](const Tensor<T>& s) {
    Tensor<T> z = scale(s, inv_tau);
    Tensor<T> lse = logsumexp(add(z, exclude));  // [B]
    // sum_j (-z_ij + lse_i) = B * lse_i - sum_j z_ij
    return sub(scale(sum(lse), static_cast<T>(b)), sum(z));
  };
  return scale(add(direction(s_e2t), direction(s_t2e)), T(1) / static_cast<T>(2 * b));
}

/// Component values of one batch, in log order.
struct LossValues {
  double e_rec = 0, t_rec = 0, orth = 0, siglip = 0, cons = 0;
};

/// L_Full = L_Cons + l0 e_rec + l1 t_rec + l2 orth + l3 siglip.
template <typename T>
Tensor<T> loss_full(const Tensor<T>& cons, const Tensor<T>& e_rec, const Tensor<T>& t_rec, const Tensor<T>& orth,
                    const Tensor<T>& siglip, const AlignConfig& cfg) {
  cfg.validate();
  Tensor<T> total = cons;
  auto term = [&](const Tensor<T>& x, double w) {
    if (w != 0.0) total = add(total, scale(x, static_cast<T>(w)));
  };
  term(e_rec, cfg.lambda0);
  term(t_rec, cfg.lambda1);
  term(orth, cfg.lambda2);
  term(siglip, cfg.lambda3);
  return total;
}

inline double loss_full(const LossValues& v, const AlignConfig& cfg) {
  cfg.validate();
  return v.cons + cfg.lambda0 * v.e_rec + cfg.lambda1 * v.t_rec + cfg.lambda2 * v.orth + cfg.lambda3 * v.siglip;
}

}  // namespace cgdmer::model
