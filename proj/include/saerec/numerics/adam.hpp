#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "saerec/numerics/tensor.hpp"

namespace saerec::numerics {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for a fixed list of parameters.
template <typename T>
struct AdamState {
  AdamOptions options;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::int64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(std::span<const Tensor<T>* const> params, AdamOptions options = {}) {
  AdamState<T> state;
  state.options = options;
  for (const Tensor<T>* p : params) {
    state.first_moment.emplace_back(p->shape());
    state.second_moment.emplace_back(p->shape());
  }
  return state;
}

/// One bias-corrected Adam update, in place.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads, AdamState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], *grads[i], "adam_step");
    require_same_shape(*params[i], state.first_moment[i], "adam_step");
  }
  ++state.step;
  const AdamOptions& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const T step_size = static_cast<T>(o.lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T b1 = static_cast<T>(o.beta1);
  const T b2 = static_cast<T>(o.beta2);
  const T eps = static_cast<T>(o.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = state.first_moment[i];
    Tensor<T>& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
    }
  }
}

}  // namespace saerec::numerics
