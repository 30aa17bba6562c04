#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lowbit/prng.hpp"
#include "lowbit/tensor.hpp"

namespace lowbit {

/// I.i.d. uniform on [-L, +L] with L = sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(int64_t fan_in, int64_t fan_out, Shape shape,
                             Prng& rng, bool requires_grad = true) {
  if (fan_in <= 0 || fan_out <= 0)
    throw std::invalid_argument("glorot_uniform: fans must be positive");
  const float limit =
      std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
  for (float& v : data) v = (2.0f * rng.uniform() - 1.0f) * limit;
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

inline Tensor uniform_init(Shape shape, float lo, float hi, Prng& rng,
                           bool requires_grad = true) {
  std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
  for (float& v : data) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

}  // namespace lowbit
