#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "evcmf/tensor.hpp"

namespace evcmf {

/// Named trainable tensors, iterated in insertion order.
template <typename T>
class ParamStore {
 public:
  /// Registers a leaf with requires_grad set. Names must be unique.
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    if (!value.requires_grad()) value = Tensor<T>::from_data(value.shape(), value.values(), true);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  /// Weight drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor<T>& add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> values(element_count(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng));
    return add(name, Tensor<T>::from_data(std::move(shape), std::move(values), true));
  }

  Tensor<T>& add_constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>::full(std::move(shape), value, true));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return tensors_[it->second];
  }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return tensors_[it->second];
  }
  const Tensor<T>& operator[](const std::string& name) const { return at(name); }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }
  Tensor<T>& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& tensor(std::size_t i) const { return tensors_[i]; }

  std::size_t element_total() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  /// Deep copy with another scalar type (e.g. float -> double for checking).
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].template cast<U>(true));
    return out;
  }

  ParamStore clone() const { return cast<T>(); }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace evcmf
