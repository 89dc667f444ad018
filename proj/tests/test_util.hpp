#pragma once

#include <vector>

#include "avd2v/grad_check.hpp"
#include "avd2v/tensor.hpp"

namespace avd2v::testing {

inline Tensor<double> randn(Shape shape, Rng& rng, double sd = 1.0, bool grad = false) {
  return Tensor<double>::randn(std::move(shape), rng, sd, grad);
}

// Scalar probe sum(x ⊙ r) with a fixed random r, so every output coordinate
// reaches the loss with a distinct weight.
struct Projector {
  Rng rng;
  std::vector<Tensor<double>> cache;

  explicit Projector(std::uint64_t seed) : rng(seed) {}

  Tensor<double> operator()(const Tensor<double>& x, std::size_t slot = 0) {
    if (cache.size() <= slot) cache.resize(slot + 1);
    if (!cache[slot].defined() || cache[slot].shape() != x.shape()) cache[slot] = randn(x.shape(), rng);
    return sum(mul(x, cache[slot]));
  }
};

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace avd2v::testing
