#pragma once

#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cgdmer/numerics/random.hpp"
#include "cgdmer/numerics/tensor.hpp"

namespace cgdmer::nn {

enum class Init { kNormal, kZeros, kOnes };

/// Ordered registry of every trainable tensor in a model. Registration order
/// is the serialization and optimizer-slot order.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(double init_std = 0.02) : init_std_(init_std) {}

  Tensor<T> add(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (index_.count(name)) throw std::logic_error("parameter registered twice: " + name);
    std::vector<T> values(shape_numel(shape));
    std::normal_distribution<double> normal(0.0, init_std_);
    for (T& v : values) {
      switch (init) {
        case Init::kNormal: v = static_cast<T>(normal(rng)); break;
        case Init::kZeros: v = T(0); break;
        case Init::kOnes: v = T(1); break;
      }
    }
    auto t = Tensor<T>::from(std::move(shape), std::move(values), true);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }

  std::size_t size() const { return tensors_.size(); }
  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  Tensor<T> at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return tensors_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  /// Overwrites this store's values from another store with identical layout.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    if (other.names() != names_) throw std::invalid_argument("copy_values_from: parameter layouts differ");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      auto src = other.tensors()[i].data();
      auto dst = tensors_[i].mutable_data();
      if (src.size() != dst.size()) throw ShapeError("copy_values_from: size mismatch at " + names_[i]);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<T>(src[j]);
    }
  }

 private:
  double init_std_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cgdmer::nn
