#pragma once

// Differentiable primitives. Every function validates shapes, computes the
// value eagerly and, when an input requires a gradient, records its backward rule.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#if defined(__AVX__)
#include <immintrin.h>
#endif
#include <numbers>
#include <random>

#include "cgdmer/numerics/tensor.hpp"

namespace cgdmer {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

/// C[M,N] (+)= op(A) * op(B), with op(A) of shape [M,K] and op(B) of shape [K,N].
template <typename T>
void gemm(T* c, std::size_t m, std::size_t n, std::size_t k, const T* a, bool ta, const T* b, bool tb,
          bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap<T> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!ta && !tb) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
  } else if (!ta && tb) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
  } else if (ta && !tb) {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
  } else {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, N, K).transpose();
  }
#if defined(__AVX__)
  // Eigen's wide kernels can leave the upper vector state dirty; the scalar
  // SSE libm routines used elsewhere (erf, exp) then run ~15x slower.
  _mm256_zeroupper();
#endif
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis, 0 when broadcast
  bool same = false;
};

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_fail(op, a, b);
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  auto sa = strides_of(pa), sb = strides_of(pb);
  bc.stride_a.resize(r);
  bc.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    bc.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

/// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = bc.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

/// Elementwise binary op with broadcasting. `da`/`db` return the local partials.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  Broadcast bc = broadcast_shapes(op, a.shape(), b.shape());
  std::vector<T> out(shape_numel(bc.out));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  // Common layouts get flat loops: equal shapes, or b repeating over the
  // leading axes of a (bias rows). Everything else walks the strides.
  const std::size_t n = out.size();
  auto core = b.shape().begin();
  while (core != b.shape().end() && *core == 1) ++core;
  const auto core_rank = static_cast<std::ptrdiff_t>(b.shape().end() - core);
  const bool suffix = a.shape() == bc.out && core_rank <= static_cast<std::ptrdiff_t>(a.rank()) &&
                      std::equal(core, b.shape().end(), a.shape().end() - core_rank);
  const std::size_t period = suffix ? b.numel() : 0;
  if (suffix) {
    for (std::size_t o = 0; o < n; o += period)
      for (std::size_t j = 0; j < period; ++j) out[o + j] = f(av[o + j], bv[j]);
  } else {
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(av[i], bv[j]); });
  }
  Shape shape = bc.out;
  return make_result(op, std::move(shape), std::move(out), {&a, &b}, [bc, da, db, period](Node<T>& self) {
    const T* g = self.grad.data();
    const T* x = parent_value(self, 0);
    const T* y = parent_value(self, 1);
    T* gx = parent_grad(self, 0);
    T* gy = parent_grad(self, 1);
    if (period) {
      const std::size_t n = self.value.size();
      for (std::size_t o = 0; o < n; o += period) {
        if (gx)
          for (std::size_t j = 0; j < period; ++j) gx[o + j] += g[o + j] * da(x[o + j], y[j]);
        if (gy)
          for (std::size_t j = 0; j < period; ++j) gy[j] += g[o + j] * db(x[o + j], y[j]);
      }
      return;
    }
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (gx) gx[i] += g[o] * da(x[i], y[j]);
      if (gy) gy[j] += g[o] * db(x[i], y[j]);
    });
  });
}

/// Elementwise unary op; `df(x, y)` is the derivative given input and output.
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(op, x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    const T* xv = parent_value(self, 0);
    const T* g = self.grad.data();
    const T* y = self.value.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * df(xv[i], y[i]);
  });
}

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

inline Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

// Bulk transcendental kernels. Single precision goes through Eigen's SIMD
// versions; double keeps the libm results the gradient checks are tuned to.
// The float path runs on an aligned fixed-size block: Eigen would otherwise
// peel unaligned heads through the scalar routine, making results depend on
// where the allocator placed the buffer.
template <typename F>
void blocked_float_map(float* v, std::size_t n, F f) {
  constexpr std::size_t kBlock = 64;
  Eigen::Array<float, kBlock, 1> buf;
  for (std::size_t i = 0; i < n; i += kBlock) {
    const std::size_t m = std::min(kBlock, n - i);
    std::copy(v + i, v + i + m, buf.data());
    std::fill(buf.data() + m, buf.data() + kBlock, 0.0f);
    buf = f(buf);
    std::copy(buf.data(), buf.data() + m, v + i);
  }
}

template <typename T>
void exp_inplace(T* v, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    blocked_float_map(v, n, [](const auto& a) { return a.exp(); });
  } else {
    for (std::size_t i = 0; i < n; ++i) v[i] = std::exp(v[i]);
  }
}

template <typename T>
void erf_inplace(T* v, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    blocked_float_map(v, n, [](const auto& a) { return a.erf(); });
  } else {
    for (std::size_t i = 0; i < n; ++i) v[i] = std::erf(v[i]);
  }
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary<T>("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) throw NonFiniteError("log: non-positive input");
  }
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) throw NonFiniteError("sqrt: non-positive input");
  }
  return detail::unary<T>("sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

/// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.707106781186547524400844362104849039L);
  const std::size_t n = x.numel();
  const T* xv = x.data().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * kInvSqrt2;
  detail::erf_inplace(out.data(), n);
  for (std::size_t i = 0; i < n; ++i) out[i] = T(0.5) * xv[i] * (T(1) + out[i]);
  return detail::make_result("gelu", x.shape(), std::move(out), {&x}, [n](Node<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const T* xv = detail::parent_value(self, 0);
    std::vector<T> cdf(n), pdf(n);
    for (std::size_t i = 0; i < n; ++i) {
      cdf[i] = xv[i] * kInvSqrt2;
      pdf[i] = T(-0.5) * xv[i] * xv[i];
    }
    detail::erf_inplace(cdf.data(), n);
    detail::exp_inplace(pdf.data(), n);
    constexpr T kPdf = std::numbers::inv_sqrtpi_v<T> * kInvSqrt2;
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (T(0.5) * (T(1) + cdf[i]) + xv[i] * pdf[i] * kPdf);
  });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); },
                          [](T, T y) { return y * (T(1) - y); });
}

/// log(sigmoid(x)) without overflow for large |x|.
template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "log_sigmoid", x, [](T v) { return std::min(v, T(0)) - std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) { return sigmoid_scalar(-v); });
}

// ------------------------------------------------------------------ matmul

/// op(a) @ op(b) for rank-2 operands, or batched over a shared leading axis for rank 3.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3)) shape_fail("matmul", sa, sb);
  const bool batched = sa.size() == 3;
  const std::size_t batch = batched ? sa[0] : 1;
  if (batched && sb[0] != batch) shape_fail("matmul", sa, sb);
  const std::size_t o = batched ? 1 : 0;
  const std::size_t m = trans_a ? sa[o + 1] : sa[o];
  const std::size_t k = trans_a ? sa[o] : sa[o + 1];
  const std::size_t kb = trans_b ? sb[o + 1] : sb[o];
  const std::size_t n = trans_b ? sb[o] : sb[o + 1];
  if (k != kb) shape_fail("matmul", sa, sb);
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(out.data() + i * m * n, m, n, k, a.data().data() + i * m * k, trans_a,
                 b.data().data() + i * k * n, trans_b, false);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return detail::make_result("matmul", std::move(shape), std::move(out), {&a, &b},
                             [=](Node<T>& self) {
                               const T* g = self.grad.data();
                               const T* av = detail::parent_value(self, 0);
                               const T* bv = detail::parent_value(self, 1);
                               T* ga = detail::parent_grad(self, 0);
                               T* gb = detail::parent_grad(self, 1);
                               for (std::size_t i = 0; i < batch; ++i) {
                                 const T* gi = g + i * m * n;
                                 const T* ai = av + i * m * k;
                                 const T* bi = bv + i * k * n;
                                 if (ga) {
                                   if (!trans_a)
                                     detail::gemm(ga + i * m * k, m, k, n, gi, false, bi, !trans_b, true);
                                   else
                                     detail::gemm(ga + i * m * k, k, m, n, bi, trans_b, gi, true, true);
                                 }
                                 if (gb) {
                                   if (!trans_b)
                                     detail::gemm(gb + i * k * n, k, n, m, ai, !trans_a, gi, false, true);
                                   else
                                     detail::gemm(gb + i * k * n, n, k, m, gi, true, ai, trans_a, true);
                                 }
                               }
                             });
}

// ------------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  std::vector<T> out = x.values();
  return detail::make_result("reshape", std::move(shape), std::move(out), {&x}, [](Node<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

/// General axis permutation: out.shape[i] = x.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> axes) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  {
    std::vector<bool> used(r, false);
    bool ok = axes.size() == r;
    for (std::size_t ax : axes) {
      if (!ok || ax >= r || used[ax]) {
        ok = false;
        break;
      }
      used[ax] = true;
    }
    if (!ok) shape_fail("permute", s, Shape(axes.begin(), axes.end()));
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[axes[i]];
  auto in_strides = detail::strides_of(s);
  // src offset for each output element, precomputed once and reused by backward
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
      src[o] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += in_strides[axes[d]];
        if (idx[d] < out_shape[d]) break;
        off -= in_strides[axes[d]] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[src[o]];
  return detail::make_result("permute", std::move(out_shape), std::move(out), {&x},
                             [src = std::move(src)](Node<T>& self) {
                               T* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
                             });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

namespace detail {
struct AxisSplit {
  std::size_t outer, n, inner;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}
}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s);
    }
    out_shape[axis] += s[axis];
  }
  const auto sp = detail::split_at(out_shape, axis);
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * sp.inner);
  const std::size_t row = sp.n * sp.inner;
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* pv = parts[k].data().data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv + o * widths[k], widths[k], out.data() + o * row + offset);
    }
    offset += widths[k];
  }
  return detail::make_result_n("concat", std::move(out_shape), std::move(out), parts,
                               [widths, row, outer = sp.outer](Node<T>& self) {
                                 std::size_t offset = 0;
                                 for (std::size_t k = 0; k < widths.size(); ++k) {
                                   if (T* gp = detail::parent_grad(self, k)) {
                                     for (std::size_t o = 0; o < outer; ++o) {
                                       const T* g = self.grad.data() + o * row + offset;
                                       T* dst = gp + o * widths[k];
                                       for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += g[i];
                                     }
                                   }
                                   offset += widths[k];
                                 }
                               });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  const auto sp = detail::split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * sp.inner;
  const std::size_t row = sp.n * sp.inner;
  const std::size_t off = begin * sp.inner;
  std::vector<T> out(sp.outer * w);
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) std::copy_n(xv + o * row + off, w, out.data() + o * w);
  return detail::make_result("slice", std::move(out_shape), std::move(out), {&x},
                             [w, row, off, outer = sp.outer](Node<T>& self) {
                               T* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t i = 0; i < w; ++i) gx[o * row + off + i] += self.grad[o * w + i];
                               }
                             });
}

/// Gathers rows (index into axis 0). Repeated indices accumulate their gradients.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ShapeError("index_select: empty index list for " + shape_str(x.shape()));
  const std::size_t n0 = x.dim(0);
  const std::size_t inner = x.numel() / n0;
  for (std::size_t r : rows) {
    if (r >= n0) {
      throw ShapeError("index_select: row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<T> out(rows.size() * inner);
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xv + rows[i] * inner, inner, out.data() + i * inner);
  return detail::make_result("index_select", std::move(out_shape), std::move(out), {&x},
                             [rows, inner](Node<T>& self) {
                               T* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t i = 0; i < rows.size(); ++i) {
                                 const T* g = self.grad.data() + i * inner;
                                 T* dst = gx + rows[i] * inner;
                                 for (std::size_t j = 0; j < inner; ++j) dst[j] += g[j];
                               }
                             });
}

// --------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  return detail::make_result("sum", Shape{1}, std::vector<T>{s}, {&x}, [](Node<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum along one axis; the axis is removed unless keepdim.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis " + std::to_string(axis) + " for " + shape_str(s));
  const auto sp = detail::split_at(s, axis);
  Shape out_shape = s;
  if (keepdim || s.size() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j) {
      const T* src = xv + (o * sp.n + j) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return detail::make_result("sum_axis", std::move(out_shape), std::move(out), {&x}, [sp](Node<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.n; ++j) {
        T* dst = gx + (o * sp.n + j) * sp.inner;
        const T* g = self.grad.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  const T n = static_cast<T>(x.shape().at(axis));
  return scale(sum_axis(x, axis, keepdim), T(1) / n);
}

// ----------------------------------------------------- last-axis normalizers

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * d;
    T* y = out.data() + r * d;
    const T mx = *std::max_element(in, in + d);
    for (std::size_t i = 0; i < d; ++i) y[i] = in[i] - mx;
    detail::exp_inplace(y, d);
    T z = T(0);
    for (std::size_t i = 0; i < d; ++i) z += y[i];
    const T inv = T(1) / z;
    for (std::size_t i = 0; i < d; ++i) y[i] *= inv;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {&x}, [d, rows](Node<T>& self) {
    T* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T dot = T(0);
      for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[i] * (g[i] - dot);
    }
  });
}

/// log(sum(exp(x))) along the last axis, which is removed.
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(rows);
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * d;
    const T mx = *std::max_element(in, in + d);
    T z = T(0);
    for (std::size_t i = 0; i < d; ++i) z += std::exp(in[i] - mx);
    out[r] = mx + std::log(z);
  }
  return detail::make_result("logsumexp", detail::drop_last(x.shape()), std::move(out), {&x},
                             [d, rows](Node<T>& self) {
                               T* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               const T* xv = detail::parent_value(self, 0);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t i = 0; i < d; ++i) {
                                   gx[r * d + i] += self.grad[r] * std::exp(xv[r * d + i] - self.value[r]);
                                 }
                               }
                             });
}

/// Per-row cross-entropy of softmax(logits) against class indices; returns [rows].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  if (targets.size() != rows) {
    shape_fail("softmax_cross_entropy", logits.shape(), Shape{targets.size()});
  }
  for (std::size_t t : targets) {
    if (t >= c) throw ShapeError("softmax_cross_entropy: target " + std::to_string(t) + " >= classes " + std::to_string(c));
  }
  std::vector<T> out(rows);
  std::vector<T> lse(rows);
  const T* xv = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * c;
    const T mx = *std::max_element(in, in + c);
    T z = T(0);
    for (std::size_t i = 0; i < c; ++i) z += std::exp(in[i] - mx);
    lse[r] = mx + std::log(z);
    out[r] = lse[r] - in[targets[r]];
  }
  return detail::make_result("softmax_cross_entropy", Shape{rows}, std::move(out), {&logits},
                             [targets, lse = std::move(lse), c](Node<T>& self) {
                               T* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               const T* xv = detail::parent_value(self, 0);
                               for (std::size_t r = 0; r < targets.size(); ++r) {
                                 const T g = self.grad[r];
                                 for (std::size_t i = 0; i < c; ++i) {
                                   const T p = std::exp(xv[r * c + i] - lse[r]);
                                   gx[r * c + i] += g * (p - (i == targets[r] ? T(1) : T(0)));
                                 }
                               }
                             });
}

/// Normalizes over the last axis, then applies per-feature gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = detail::last_dim(x.shape());
  if (gamma.numel() != d || beta.numel() != d) shape_fail("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), rstd(rows);
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = (in[i] - mu) * rstd[r] * gv[i] + bv[i];
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [d, rows, rstd = std::move(rstd)](Node<T>& self) {
        const T* xv = detail::parent_value(self, 0);
        const T* gv = detail::parent_value(self, 1);
        T* gx = detail::parent_grad(self, 0);
        T* gg = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        std::vector<T> xhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* in = xv + r * d;
          const T* g = self.grad.data() + r * d;
          T mu = T(0);
          for (std::size_t i = 0; i < d; ++i) mu += in[i];
          mu /= static_cast<T>(d);
          T mean_dy = T(0), mean_dy_xhat = T(0);
          for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (in[i] - mu) * rstd[r];
            const T dy = g[i] * gv[i];
            mean_dy += dy;
            mean_dy_xhat += dy * xhat[i];
            if (gg) gg[i] += g[i] * xhat[i];
            if (gb) gb[i] += g[i];
          }
          mean_dy /= static_cast<T>(d);
          mean_dy_xhat /= static_cast<T>(d);
          if (gx) {
            for (std::size_t i = 0; i < d; ++i) {
              gx[r * d + i] += rstd[r] * (g[i] * gv[i] - mean_dy - xhat[i] * mean_dy_xhat);
            }
          }
        }
      });
}

/// Group normalization of [n, C, P] activations: statistics over (C/groups) x P
/// per sample and group, then per-channel gain and bias.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() != 3) throw ShapeError("group_norm: expected [n,C,P], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), p = x.dim(2);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
                     " groups");
  }
  if (gamma.numel() != c || beta.numel() != c) shape_fail("group_norm", x.shape(), gamma.shape());
  const std::size_t cg = c / groups;
  const std::size_t m = cg * p;
  std::vector<T> out(x.numel()), rstd(n * groups), mus(n * groups);
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (s * c + g * cg) * p;
      T mu = T(0);
      for (std::size_t i = 0; i < m; ++i) mu += xv[base + i];
      mu /= static_cast<T>(m);
      T var = T(0);
      for (std::size_t i = 0; i < m; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
      var /= static_cast<T>(m);
      const T rs = T(1) / std::sqrt(var + eps);
      mus[s * groups + g] = mu;
      rstd[s * groups + g] = rs;
      for (std::size_t ch = 0; ch < cg; ++ch) {
        const std::size_t cc = g * cg + ch;
        for (std::size_t t = 0; t < p; ++t) {
          const std::size_t i = base + ch * p + t;
          out[i] = (xv[i] - mu) * rs * gv[cc] + bv[cc];
        }
      }
    }
  }
  return detail::make_result(
      "group_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [n, c, p, groups, cg, m, rstd = std::move(rstd), mus = std::move(mus)](Node<T>& self) {
        const T* xv = detail::parent_value(self, 0);
        const T* gv = detail::parent_value(self, 1);
        T* gx = detail::parent_grad(self, 0);
        T* gg = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        const T* gy = self.grad.data();
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t base = (s * c + g * cg) * p;
            const T mu = mus[s * groups + g], rs = rstd[s * groups + g];
            T mean_dy = T(0), mean_dy_xhat = T(0);
            for (std::size_t ch = 0; ch < cg; ++ch) {
              const std::size_t cc = g * cg + ch;
              for (std::size_t t = 0; t < p; ++t) {
                const std::size_t i = base + ch * p + t;
                const T xhat = (xv[i] - mu) * rs;
                const T dy = gy[i] * gv[cc];
                mean_dy += dy;
                mean_dy_xhat += dy * xhat;
                if (gg) gg[cc] += gy[i] * xhat;
                if (gb) gb[cc] += gy[i];
              }
            }
            if (!gx) continue;
            mean_dy /= static_cast<T>(m);
            mean_dy_xhat /= static_cast<T>(m);
            for (std::size_t ch = 0; ch < cg; ++ch) {
              const std::size_t cc = g * cg + ch;
              for (std::size_t t = 0; t < p; ++t) {
                const std::size_t i = base + ch * p + t;
                const T xhat = (xv[i] - mu) * rs;
                gx[i] += rs * (gy[i] * gv[cc] - mean_dy - xhat * mean_dy_xhat);
              }
            }
          }
        }
      });
}

/// x / max(||x||, 1e-12) along the last axis.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  constexpr T kFloor = T(1e-12);
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), norms(rows);
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t i = 0; i < d; ++i) ss += xv[r * d + i] * xv[r * d + i];
    norms[r] = std::max(std::sqrt(ss), kFloor);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] / norms[r];
  }
  return detail::make_result("l2_normalize", x.shape(), std::move(out), {&x},
                             [d, rows, norms = std::move(norms)](Node<T>& self) {
                               T* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const T* y = self.value.data() + r * d;
                                 const T* g = self.grad.data() + r * d;
                                 if (norms[r] <= kFloor) {
                                   for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[i] / kFloor;
                                   continue;
                                 }
                                 T dot = T(0);
                                 for (std::size_t i = 0; i < d; ++i) dot += y[i] * g[i];
                                 for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (g[i] - y[i] * dot) / norms[r];
                               }
                             });
}

/// sum((a-b)^2) along the last axis, which is removed.
template <typename T>
Tensor<T> squared_l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("squared_l2_distance", a.shape(), b.shape());
  const std::size_t d = detail::last_dim(a.shape());
  const std::size_t rows = a.numel() / d;
  std::vector<T> out(rows, T(0));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      const T diff = av[r * d + i] - bv[r * d + i];
      out[r] += diff * diff;
    }
  }
  return detail::make_result("squared_l2_distance", detail::drop_last(a.shape()), std::move(out), {&a, &b},
                             [d, rows](Node<T>& self) {
                               const T* av = detail::parent_value(self, 0);
                               const T* bv = detail::parent_value(self, 1);
                               T* ga = detail::parent_grad(self, 0);
                               T* gb = detail::parent_grad(self, 1);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t i = 0; i < d; ++i) {
                                   const T v = T(2) * (av[r * d + i] - bv[r * d + i]) * self.grad[r];
                                   if (ga) ga[r * d + i] += v;
                                   if (gb) gb[r * d + i] -= v;
                                 }
                               }
                             });
}

/// Cosine similarity along the last axis. Pairs where either norm is below
/// 1e-8 are defined to have similarity 0 and contribute no gradient.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr T kDegenerate = T(1e-8);
  if (a.shape() != b.shape()) shape_fail("cosine_similarity", a.shape(), b.shape());
  const std::size_t d = detail::last_dim(a.shape());
  const std::size_t rows = a.numel() / d;
  std::vector<T> out(rows, T(0)), na(rows), nb(rows);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = T(0), sa = T(0), sb = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dot += av[r * d + i] * bv[r * d + i];
      sa += av[r * d + i] * av[r * d + i];
      sb += bv[r * d + i] * bv[r * d + i];
    }
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    if (na[r] >= kDegenerate && nb[r] >= kDegenerate) out[r] = dot / (na[r] * nb[r]);
  }
  return detail::make_result(
      "cosine_similarity", detail::drop_last(a.shape()), std::move(out), {&a, &b},
      [d, rows, na = std::move(na), nb = std::move(nb)](Node<T>& self) {
        const T* av = detail::parent_value(self, 0);
        const T* bv = detail::parent_value(self, 1);
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          if (na[r] < kDegenerate || nb[r] < kDegenerate) continue;
          const T c = self.value[r], g = self.grad[r];
          const T inv = T(1) / (na[r] * nb[r]);
          for (std::size_t i = 0; i < d; ++i) {
            const T x = av[r * d + i], y = bv[r * d + i];
            if (ga) ga[r * d + i] += g * (y * inv - c * x / (na[r] * na[r]));
            if (gb) gb[r * d + i] += g * (x * inv - c * y / (nb[r] * nb[r]));
          }
        }
      });
}

// --------------------------------------------------------------- convolution

/// 1-D convolution, stride 1, same padding (odd kernels).
/// x: [n, Cin, P], w: [Cout, Cin, K], b: [Cout] -> [n, Cout, P].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(1) || b.numel() != w.dim(0) || w.dim(2) % 2 == 0) {
    shape_fail("conv1d", x.shape(), w.shape());
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), p = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t half = k / 2;
  const std::size_t ck = cin * k;
  // im2col: row (s, t), column (c, j) holds x[s, c, t + j - half]
  auto im2col = [=](const T* xv, std::vector<T>& cols) {
    cols.assign(n * p * ck, T(0));
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t t = 0; t < p; ++t) {
        T* row = cols.data() + (s * p + t) * ck;
        for (std::size_t c = 0; c < cin; ++c) {
          const T* src = xv + (s * cin + c) * p;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(half);
            if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(p)) row[c * k + j] = src[pos];
          }
        }
      }
    }
  };
  std::vector<T> cols;
  im2col(x.data().data(), cols);
  std::vector<T> tmp(n * p * cout);
  detail::gemm(tmp.data(), n * p, cout, ck, cols.data(), false, w.data().data(), true, false);
  std::vector<T> out(n * cout * p);
  const T* bv = b.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t t = 0; t < p; ++t) {
      for (std::size_t o = 0; o < cout; ++o) out[(s * cout + o) * p + t] = tmp[(s * p + t) * cout + o] + bv[o];
    }
  }
  return detail::make_result(
      "conv1d", Shape{n, cout, p}, std::move(out), {&x, &w, &b},
      [=](Node<T>& self) {
        const T* g = self.grad.data();
        std::vector<T> gt(n * p * cout);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t o = 0; o < cout; ++o) {
            for (std::size_t t = 0; t < p; ++t) gt[(s * p + t) * cout + o] = g[(s * cout + o) * p + t];
          }
        }
        if (T* gb = detail::parent_grad(self, 2)) {
          for (std::size_t r = 0; r < n * p; ++r) {
            for (std::size_t o = 0; o < cout; ++o) gb[o] += gt[r * cout + o];
          }
        }
        T* gw = detail::parent_grad(self, 1);
        T* gx = detail::parent_grad(self, 0);
        if (gw) {
          std::vector<T> cols;
          im2col(detail::parent_value(self, 0), cols);
          detail::gemm(gw, cout, ck, n * p, gt.data(), true, cols.data(), false, true);
        }
        if (gx) {
          std::vector<T> gcols(n * p * ck);
          detail::gemm(gcols.data(), n * p, ck, cout, gt.data(), false, detail::parent_value(self, 1), false, false);
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t t = 0; t < p; ++t) {
              const T* row = gcols.data() + (s * p + t) * ck;
              for (std::size_t c = 0; c < cin; ++c) {
                T* dst = gx + (s * cin + c) * p;
                for (std::size_t j = 0; j < k; ++j) {
                  const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(half);
                  if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(p)) dst[pos] += row[c * k + j];
                }
              }
            }
          }
        }
      });
}

/// Inverted dropout; identity when p == 0 or outside training.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  std::vector<T> m(x.numel());
  for (T& v : m) v = keep(rng) ? T(1) / (T(1) - p) : T(0);
  return mul(x, Tensor<T>::from(x.shape(), std::move(m)));
}

}  // namespace cgdmer
