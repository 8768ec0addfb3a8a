#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "statecf/autodiff.hpp"
#include "statecf/rng.hpp"

namespace statecf::testing {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline ad::Tensor random_tensor(Rng& rng, ad::Shape shape, double scale = 1.0) {
  const std::size_t n = ad::shape_size(shape);
  return ad::Tensor(std::move(shape), random_values(rng, n, scale), true);
}

inline std::vector<double> unit_vector(Rng& rng, std::size_t d) {
  std::vector<double> v = random_values(rng, d);
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

inline double norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace statecf::testing
