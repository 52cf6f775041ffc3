#pragma once

// Random small instances of every differentiable primitive, shared by the
// unit tests, the gradcheck command and the acceptance suite. Each case reduces the primitive's
// output to a scalar through a fixed random weighting so that every output
// coordinate carries gradient signal.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cgdmer/numerics/grad_check.hpp"
#include "cgdmer/numerics/ops.hpp"

namespace cgdmer::verify {

using D = Tensor<double>;

struct PrimitiveCase {
  std::string name;
  std::function<D()> expression;
  std::vector<D> leaves;
};

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline D random_tensor(Rng& rng, Shape shape, double lo = -1.5, double hi = 1.5, bool leaf = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return D::from(std::move(shape), std::move(v), leaf);
}

inline D readout(const D& y, const D& weights) { return sum(mul(y, weights)); }

inline std::vector<std::string> primitive_names() {
  return {"add",          "add_broadcast", "sub",           "mul",          "div",
          "scale",        "add_scalar",    "square",        "matmul",       "matmul_transposed",
          "matmul_batched", "transpose",   "permute",       "reshape",      "concat",
          "slice",        "index_select",  "sum",           "mean",         "sum_axis",
          "mean_axis",    "exp",           "log",           "sqrt",         "gelu",
          "softmax",      "sigmoid",       "log_sigmoid",   "logsumexp",    "layer_norm",
          "group_norm",   "l2_normalize",  "squared_l2_distance", "cosine_similarity",
          "softmax_cross_entropy", "conv1d"};
}

inline PrimitiveCase make_primitive_case(const std::string& name, Rng& rng) {
  PrimitiveCase c;
  c.name = name;
  const std::size_t n = pick(rng, 1, 4), m = pick(rng, 1, 5), k = pick(rng, 1, 4);
  auto with_readout = [&](std::vector<D> leaves, std::function<D()> body, Shape out_shape) {
    D w = random_tensor(rng, std::move(out_shape), -1.0, 1.0, false);
    c.leaves = std::move(leaves);
    c.expression = [body = std::move(body), w]() { return readout(body(), w); };
  };

  if (name == "add" || name == "sub" || name == "mul" || name == "div") {
    D a = random_tensor(rng, {n, m});
    D b = name == "div" ? random_tensor(rng, {n, m}, 0.5, 2.0) : random_tensor(rng, {n, m});
    std::function<D()> body;
    if (name == "add") body = [a, b] { return add(a, b); };
    if (name == "sub") body = [a, b] { return sub(a, b); };
    if (name == "mul") body = [a, b] { return mul(a, b); };
    if (name == "div") body = [a, b] { return div(a, b); };
    with_readout({a, b}, body, {n, m});
  } else if (name == "add_broadcast") {
    D a = random_tensor(rng, {n, k, m});
    D b = random_tensor(rng, {k, 1});
    with_readout({a, b}, [a, b] { return add(a, b); }, {n, k, m});
  } else if (name == "scale") {
    D a = random_tensor(rng, {n, m});
    with_readout({a}, [a] { return scale(a, 1.7); }, {n, m});
  } else if (name == "add_scalar") {
    D a = random_tensor(rng, {n, m});
    with_readout({a}, [a] { return add_scalar(a, -0.3); }, {n, m});
  } else if (name == "square") {
    D a = random_tensor(rng, {n, m});
    with_readout({a}, [a] { return square(a); }, {n, m});
  } else if (name == "matmul") {
    D a = random_tensor(rng, {n, k}), b = random_tensor(rng, {k, m});
    with_readout({a, b}, [a, b] { return matmul(a, b); }, {n, m});
  } else if (name == "matmul_transposed") {
    const bool ta = pick(rng, 0, 1), tb = pick(rng, 0, 1);
    D a = random_tensor(rng, ta ? Shape{k, n} : Shape{n, k});
    D b = random_tensor(rng, tb ? Shape{m, k} : Shape{k, m});
    with_readout({a, b}, [a, b, ta, tb] { return matmul(a, b, ta, tb); }, {n, m});
  } else if (name == "matmul_batched") {
    const std::size_t bt = pick(rng, 1, 3);
    const bool tb = pick(rng, 0, 1);
    D a = random_tensor(rng, {bt, n, k});
    D b = random_tensor(rng, tb ? Shape{bt, m, k} : Shape{bt, k, m});
    with_readout({a, b}, [a, b, tb] { return matmul(a, b, false, tb); }, {bt, n, m});
  } else if (name == "transpose") {
    D a = random_tensor(rng, {n, m});
    with_readout({a}, [a] { return transpose(a); }, {m, n});
  } else if (name == "permute") {
    D a = random_tensor(rng, {n, m, k});
    with_readout({a}, [a] { return permute(a, {2, 0, 1}); }, {k, n, m});
  } else if (name == "reshape") {
    D a = random_tensor(rng, {n, m});
    with_readout({a}, [a, n, m] { return reshape(a, {m * n}); }, {n * m});
  } else if (name == "concat") {
    const std::size_t m2 = pick(rng, 1, 3);
    D a = random_tensor(rng, {n, m}), b = random_tensor(rng, {n, m2});
    with_readout({a, b}, [a, b] { return concat<double>({a, b}, 1); }, {n, m + m2});
  } else if (name == "slice") {
    D a = random_tensor(rng, {n, m + 2});
    const std::size_t b0 = pick(rng, 0, m), e0 = pick(rng, b0 + 1, m + 2);
    with_readout({a}, [a, b0, e0] { return slice(a, 1, b0, e0); }, {n, e0 - b0});
  } else if (name == "index_select") {
    D a = random_tensor(rng, {n, m});
    std::vector<std::size_t> rows;
    const std::size_t r = pick(rng, 1, 5);
    for (std::size_t i = 0; i < r; ++i) rows.push_back(pick(rng, 0, n - 1));
    with_readout({a}, [a, rows] { return index_select(a, rows); }, {r, m});
  } else if (name == "sum") {
    D a = random_tensor(rng, {n, m});
    c.leaves = {a};
    c.expression = [a] { return sum(square(a)); };
  } else if (name == "mean") {
    D a = random_tensor(rng, {n, m});
    c.leaves = {a};
    c.expression = [a] { return mean(square(a)); };
  } else if (name == "sum_axis" || name == "mean_axis") {
    D a = random_tensor(rng, {n, m, k});
    const std::size_t axis = pick(rng, 0, 2);
    Shape out = {n, m, k};
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (name == "sum_axis") {
      with_readout({a}, [a, axis] { return sum_axis(a, axis); }, out);
    } else {
      with_readout({a}, [a, axis] { return mean_axis(a, axis); }, out);
    }
  } else if (name == "exp") {
    D a = random_tensor(rng, {n, m});
    with_readout({a}, [a] { return exp(a); }, {n, m});
  } else if (name == "log") {
    D a = random_tensor(rng, {n, m}, 0.3, 3.0);
    with_readout({a}, [a] { return log(a); }, {n, m});
  } else if (name == "sqrt") {
    D a = random_tensor(rng, {n, m}, 0.3, 3.0);
    with_readout({a}, [a] { return sqrt(a); }, {n, m});
  } else if (name == "gelu") {
    D a = random_tensor(rng, {n, m}, -3.0, 3.0);
    with_readout({a}, [a] { return gelu(a); }, {n, m});
  } else if (name == "softmax") {
    D a = random_tensor(rng, {n, m + 1}, -3.0, 3.0);
    with_readout({a}, [a] { return softmax(a); }, {n, m + 1});
  } else if (name == "sigmoid") {
    D a = random_tensor(rng, {n, m}, -4.0, 4.0);
    with_readout({a}, [a] { return sigmoid(a); }, {n, m});
  } else if (name == "log_sigmoid") {
    D a = random_tensor(rng, {n, m}, -6.0, 6.0);
    with_readout({a}, [a] { return log_sigmoid(a); }, {n, m});
  } else if (name == "logsumexp") {
    D a = random_tensor(rng, {n, m + 1}, -3.0, 3.0);
    with_readout({a}, [a] { return logsumexp(a); }, {n});
  } else if (name == "layer_norm") {
    const std::size_t d = m + 1;
    D a = random_tensor(rng, {n, d}), g = random_tensor(rng, {d}), b = random_tensor(rng, {d});
    with_readout({a, g, b}, [a, g, b] { return layer_norm(a, g, b); }, {n, d});
  } else if (name == "group_norm") {
    const std::size_t groups = pick(rng, 1, 2), ch = groups * pick(rng, 1, 2), p = pick(rng, 2, 4);
    D a = random_tensor(rng, {n, ch, p}), g = random_tensor(rng, {ch}), b = random_tensor(rng, {ch});
    with_readout({a, g, b}, [a, g, b, groups] { return group_norm(a, groups, g, b); }, {n, ch, p});
  } else if (name == "l2_normalize") {
    D a = random_tensor(rng, {n, m + 1});
    with_readout({a}, [a] { return l2_normalize(a); }, {n, m + 1});
  } else if (name == "squared_l2_distance") {
    D a = random_tensor(rng, {n, m}), b = random_tensor(rng, {n, m});
    with_readout({a, b}, [a, b] { return squared_l2_distance(a, b); }, {n});
  } else if (name == "cosine_similarity") {
    D a = random_tensor(rng, {n, m + 1}), b = random_tensor(rng, {n, m + 1});
    with_readout({a, b}, [a, b] { return cosine_similarity(a, b); }, {n});
  } else if (name == "softmax_cross_entropy") {
    D a = random_tensor(rng, {n, m + 1}, -3.0, 3.0);
    std::vector<std::size_t> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(pick(rng, 0, m));
    with_readout({a}, [a, t] { return softmax_cross_entropy(a, t); }, {n});
  } else if (name == "conv1d") {
    const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), p = pick(rng, 2, 6);
    const std::size_t kern = pick(rng, 0, 1) ? 3 : 5;
    D x = random_tensor(rng, {n, cin, p}), w = random_tensor(rng, {cout, cin, kern}), b = random_tensor(rng, {cout});
    with_readout({x, w, b}, [x, w, b] { return conv1d(x, w, b); }, {n, cout, p});
  } else {
    throw std::invalid_argument("unknown primitive case " + name);
  }
  return c;
}

}  // namespace cgdmer::verify
