#pragma once

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "avd2v/tensor.hpp"

namespace avd2v {

/// Named leaf tensors in insertion order. Buffers (e.g. batch-norm running
/// statistics) are stored alongside parameters but never receive gradients
/// or optimizer updates.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    value.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(value), trainable});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) { return entries_.at(lookup(name)).value; }
  const Tensor<T>& get(const std::string& name) const { return entries_.at(lookup(name)).value; }
  Tensor<T>& operator[](const std::string& name) { return get(name); }
  const Tensor<T>& operator[](const std::string& name) const { return get(name); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  /// Deep copy; trainable leaves keep requires_grad.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.value.clone_leaf(e.trainable), e.trainable);
    return out;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      std::vector<U> v(e.value.data().begin(), e.value.data().end());
      out.add(e.name, Tensor<U>::from(e.value.shape(), std::move(v)), e.trainable);
    }
    return out;
  }

  /// Copies values from `other` for every name present in both stores.
  /// Returns the number of entries copied.
  std::size_t assign_matching(const ParamStore& other, const std::string& prefix = "") {
    std::size_t copied = 0;
    for (auto& e : entries_) {
      if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
      if (!other.contains(e.name)) continue;
      const auto& src = other.get(e.name);
      if (src.shape() != e.value.shape()) throw DimensionError("shape mismatch for '" + e.name + "'");
      std::copy(src.data().begin(), src.data().end(), e.value.mutable_data().begin());
      ++copied;
    }
    return copied;
  }

  bool same_structure(const ParamStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.value.shape() != b.value.shape() || a.trainable != b.trainable) return false;
    }
    return true;
  }

  bool bit_equal(const ParamStore& other, const std::string& prefix = "") const {
    if (!same_structure(other)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!prefix.empty() && entries_[i].name.rfind(prefix, 0) != 0) continue;
      auto a = entries_[i].value.data();
      auto b = other.entries_[i].value.data();
      if (!std::equal(a.begin(), a.end(), b.begin(), [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; }))
        return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

template <class T>
Tensor<T> normal(Shape shape, Rng& rng, double stddev) {
  return Tensor<T>::randn(std::move(shape), rng, stddev);
}

/// Sine/cosine table [rows × dim]: even columns sin(r·ω_i), odd columns
/// cos(r·ω_i), ω_i = 10000^(−2i/dim). Used as the starting point of learned
/// position tables.
template <class T>
Tensor<T> sinusoidal(std::size_t rows, std::size_t dim) {
  auto t = Tensor<T>::zeros({rows, dim});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < dim; ++j) {
      const double w = std::pow(10000.0, -double(j / 2 * 2) / double(dim));
      t.at(r, j) = static_cast<T>(j % 2 == 0 ? std::sin(double(r) * w) : std::cos(double(r) * w));
    }
  return t;
}

/// He-normal for a conv kernel [O×C×k...] with fan_in = C·Πk.
template <class T>
Tensor<T> kaiming(Shape shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return Tensor<T>::randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in)));
}

}  // namespace init

}  // namespace avd2v
