#pragma once

#include <stdexcept>
#include <string>

#include "cgdmer/nn/layers.hpp"

namespace cgdmer::model {

enum class Modality { kEcg, kText };

inline const char* modality_name(Modality m) { return m == Modality::kEcg ? "ecg" : "text"; }

/// Batched head outputs: rows are samples, [B, d_proj] each.
template <typename T>
struct DisentangledPair {
  Tensor<T> specific;
  Tensor<T> shared;
  Modality modality = Modality::kEcg;
};

/// Four independent d -> d -> d_proj GELU MLPs.
template <typename T>
class HeadSet {
 public:
  HeadSet() = default;
  HeadSet(nn::ParamStore<T>& store, std::size_t d, std::size_t d_proj, Rng& rng)
      : d_(d),
        ecg_sp_(store, "heads.ecg_specific", d, d, d_proj, rng),
        ecg_sh_(store, "heads.ecg_shared", d, d, d_proj, rng),
        text_sp_(store, "heads.text_specific", d, d, d_proj, rng),
        text_sh_(store, "heads.text_shared", d, d, d_proj, rng) {}

  /// E: [B, d] (or a single [d] vector, treated as B = 1).
  DisentangledPair<T> project(const Tensor<T>& e, Modality m) const {
    Tensor<T> x = e.rank() == 1 ? reshape(e, {1, e.dim(0)}) : e;
    if (x.rank() != 2 || x.dim(1) != d_) {
      throw ShapeError(std::string("project(") + modality_name(m) + "): expected [B, " + std::to_string(d_) +
                       "], got " + shape_str(e.shape()));
    }
    const bool ecg = m == Modality::kEcg;
    return {(ecg ? ecg_sp_ : text_sp_)(x), (ecg ? ecg_sh_ : text_sh_)(x), m};
  }

  /// Shared head only. Zero-shot scoring goes through here so the specific
  /// heads are never evaluated on that path.
  Tensor<T> shared(const Tensor<T>& e, Modality m) const {
    Tensor<T> x = e.rank() == 1 ? reshape(e, {1, e.dim(0)}) : e;
    if (x.rank() != 2 || x.dim(1) != d_) {
      throw ShapeError(std::string("shared(") + modality_name(m) + "): expected [B, " + std::to_string(d_) + "], got " +
                       shape_str(e.shape()));
    }
    return m == Modality::kEcg ? ecg_sh_(x) : text_sh_(x);
  }

  std::size_t input_dim() const { return d_; }

 private:
  std::size_t d_ = 0;
  nn::Mlp<T> ecg_sp_, ecg_sh_, text_sp_, text_sh_;
};

/// (1/B) sum_i [S(sp_text, sh_text)^2 + S(sp_ecg, sh_ecg)^2], S = cosine
/// similarity (0 for near-zero vectors).
template <typename T>
Tensor<T> loss_orth(const DisentangledPair<T>& ecg, const DisentangledPair<T>& text) {
  if (ecg.specific.rank() != 2 || ecg.specific.shape() != text.specific.shape() ||
      ecg.shared.shape() != ecg.specific.shape() || text.shared.shape() != text.specific.shape()) {
    throw ShapeError("loss_orth: head outputs must all be [B, d_proj] with equal B");
  }
  Tensor<T> e = square(cosine_similarity(ecg.specific, ecg.shared));
  Tensor<T> t = square(cosine_similarity(text.specific, text.shared));
  return add(mean(t), mean(e));
}

}  // namespace cgdmer::model
