#pragma once

#include <random>

#include "saerec/numerics/tensor.hpp"

namespace saerec::testing {

template <typename T = double>
numerics::Tensor<T> random_tensor(numerics::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  numerics::Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace saerec::testing
