#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowbit/tensor.hpp"

namespace lowbit {

/// Raised when a layer's weight mean is zero and no scale can be derived
/// (an all-zero layer is dead and should be surfaced, not silently encoded).
struct DegenerateScale : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The discrete weight grid for a given value count.
///
/// values[k] = (k - v_max) / v_max with v_max = (n_values - 1) / 2, an
/// evenly spaced symmetric ladder over [-1, +1]. Zero is representable
/// exactly when n_values is odd.
struct GridSpec {
  int n_values = 0;
  float v_max = 0.0f;
  double bits = 0.0;
  std::vector<float> values;
};

inline GridSpec grid_values(int n_values) {
  if (n_values < 2)
    throw std::invalid_argument("grid_values: n_values must be >= 2, got " +
                                std::to_string(n_values));
  GridSpec g;
  g.n_values = n_values;
  g.v_max = static_cast<float>(n_values - 1) / 2.0f;
  g.bits = std::log2(static_cast<double>(n_values));
  g.values.resize(static_cast<size_t>(n_values));
  for (int k = 0; k < n_values; ++k)
    g.values[static_cast<size_t>(k)] =
        (static_cast<float>(k) - g.v_max) / g.v_max;
  return g;
}

/// How the per-layer scale is derived from the weights. The mean of the
/// absolute values is the default; the signed mean is exposed for
/// experimentation but is near zero for freshly initialized layers.
enum class MeanMode { Abs, Signed };

namespace detail {

inline float quant_gamma(std::span<const float> w, float beta, MeanMode mode) {
  if (w.empty()) throw std::invalid_argument("quantize: empty tensor");
  double acc = 0.0;
  if (mode == MeanMode::Abs) {
    for (float v : w) acc += std::fabs(v);
  } else {
    for (float v : w) acc += v;
  }
  const double mean = acc / static_cast<double>(w.size());
  if (mean == 0.0)
    throw DegenerateScale("quantize: weight mean is zero, no scale derivable");
  const float gamma = static_cast<float>(beta * mean);
  if (!std::isfinite(gamma))
    throw NumericsError("quantize: non-finite scale");
  return gamma;
}

/// Nearest-grid index for an already-normalized coordinate. Rounding is done
/// on the shifted lattice coordinate w*v_max + v_max; exact halves round away
/// from zero (std::lround), and out-of-range indices clamp to the end values.
inline int grid_index(float w_norm, const GridSpec& g) {
  long k = std::lround(w_norm * g.v_max + g.v_max);
  if (k < 0) k = 0;
  if (k >= g.n_values) k = g.n_values - 1;
  return static_cast<int>(k);
}

inline void quant_values(std::span<const float> w, float gamma,
                         const GridSpec& g, float* out) {
  for (size_t i = 0; i < w.size(); ++i)
    out[i] = g.values[static_cast<size_t>(grid_index(w[i] / gamma, g))];
}

}  // namespace detail

struct QuantResult {
  Tensor w_q;   // every element is exactly one of GridSpec::values
  float gamma;  // beta * mean, restores magnitude as gamma * w_q
};

/// Quantizes a weight tensor onto the n_values grid (inference path).
/// Returns the grid tensor and the scale; the product gamma * w_q is the
/// effective weight used in activation computations.
inline QuantResult quantize(const Tensor& w, int n_values, float beta = 1.4f,
                            MeanMode mode = MeanMode::Abs) {
  if (!w.defined() || w.numel() == 0)
    throw std::invalid_argument("quantize: empty tensor");
  const GridSpec g = grid_values(n_values);
  const float gamma = detail::quant_gamma(w.data(), beta, mode);
  std::vector<float> out(static_cast<size_t>(w.numel()));
  detail::quant_values(w.data(), gamma, g, out.data());
  return {Tensor(w.shape(), std::move(out), false), gamma};
}

/// Training-path quantization: forward values are identical to quantize()
/// (same kernel), while the gradient passes straight through to the master
/// weights scaled by 1/gamma. The quantization step contributes no
/// derivative of its own, so updates land on the 32-bit masters.
inline QuantResult quantize_ste(const Tensor& w, int n_values,
                                float beta = 1.4f,
                                MeanMode mode = MeanMode::Abs) {
  if (!w.defined() || w.numel() == 0)
    throw std::invalid_argument("quantize: empty tensor");
  const GridSpec g = grid_values(n_values);
  const float gamma = detail::quant_gamma(w.data(), beta, mode);
  std::vector<float> out(static_cast<size_t>(w.numel()));
  detail::quant_values(w.data(), gamma, g, out.data());
  Tensor y(w.shape(), std::move(out), detail::grad_wanted({&w}));
  if (y.requires_grad()) {
    const float inv_gamma = 1.0f / gamma;
    Tape::active()->record("quantize_ste", [w, y, inv_gamma] {
      if (!y.grad_allocated()) return;
      auto g2 = y.grad();
      auto wg = w.grad();
      for (size_t i = 0; i < wg.size(); ++i) wg[i] += g2[i] * inv_gamma;
    });
  }
  return {y, gamma};
}

/// Rounds an already-normalized tensor onto the grid with a straight-through
/// gradient: forward is the nearest grid value, backward is exactly the
/// incoming gradient (all-ones Jacobian diagonal).
inline Tensor ste_to_grid(const Tensor& w_norm, const GridSpec& g) {
  std::vector<float> out(static_cast<size_t>(w_norm.numel()));
  auto wv = w_norm.data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = g.values[static_cast<size_t>(detail::grid_index(wv[i], g))];
  Tensor y(w_norm.shape(), std::move(out), detail::grad_wanted({&w_norm}));
  if (y.requires_grad()) {
    Tape::active()->record("ste_to_grid", [w_norm, y] {
      if (!y.grad_allocated()) return;
      detail::accumulate(w_norm.grad(), y.grad());
    });
  }
  return y;
}

}  // namespace lowbit
