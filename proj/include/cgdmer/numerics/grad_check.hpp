#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "cgdmer/numerics/autograd.hpp"
#include "cgdmer/numerics/random.hpp"

namespace cgdmer {

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per leaf; 0 probes every coordinate.
  std::size_t max_coords_per_leaf = 0;
  /// When in (0, 1], probe ceil(fraction * total) coordinates drawn uniformly
  /// across all leaves instead (overrides max_coords_per_leaf).
  double coord_fraction = 0.0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Central-difference check of backward() for a scalar expression at 64-bit
/// precision. Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& expression,
                                  std::vector<Tensor<double>> leaves, const GradCheckOptions& opt = {}) {
  for (auto& l : leaves) l.zero_grad();
  backward(expression());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());

  GradCheckResult res;
  Rng rng(opt.seed);
  NoGradGuard no_grad;
  std::vector<std::vector<std::size_t>> picked(leaves.size());
  if (opt.coord_fraction > 0.0) {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t li = 0; li < leaves.size(); ++li)
      for (std::size_t i = 0; i < leaves[li].numel(); ++i) all.emplace_back(li, i);
    const auto k = std::min(all.size(), static_cast<std::size_t>(std::ceil(opt.coord_fraction * all.size())));
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(k);
    std::sort(all.begin(), all.end());
    for (auto [li, i] : all) picked[li].push_back(i);
  } else {
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      auto& coords = picked[li];
      coords.resize(leaves[li].numel());
      std::iota(coords.begin(), coords.end(), 0);
      if (opt.max_coords_per_leaf && coords.size() > opt.max_coords_per_leaf) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opt.max_coords_per_leaf);
        std::sort(coords.begin(), coords.end());
      }
    }
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = leaves[li];
    const auto& coords = picked[li];
    std::span<double> x = leaf.mutable_data();
    for (std::size_t i : coords) {
      const double saved = x[i];
      x[i] = saved + opt.h;
      const double fp = expression().item();
      x[i] = saved - opt.h;
      const double fm = expression().item();
      x[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[li][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++res.coords_checked;
      if (res.coords_checked == 1 || rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_leaf = li;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  res.passed = res.max_rel_error <= opt.tolerance;
  return res;
}

inline GradCheckResult grad_check(const std::function<Tensor<double>()>& expression, Tensor<double> leaf,
                                  double h = 1e-5, double tolerance = 1e-4) {
  GradCheckOptions opt;
  opt.h = h;
  opt.tolerance = tolerance;
  return grad_check(expression, std::vector<Tensor<double>>{std::move(leaf)}, opt);
}

}  // namespace cgdmer
