#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "lat/tensor.hpp"

namespace lat::testing {

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = false, double lo = -1.0,
                            double hi = 1.0) {
  auto n = shape_numel(shape);
  return Tensor::from(std::move(shape), random_values(rng, n, lo, hi), requires_grad);
}

inline double sum_values(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s;
}

}  // namespace lat::testing
