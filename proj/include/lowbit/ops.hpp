#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "lowbit/tensor.hpp"

namespace lowbit {

namespace detail {

// C[m x n] += A[m x k] * B[k x n]. std::fma keeps the result independent of
// how the compiler would otherwise contract the multiply-add.
inline void gemm_nn_acc(const float* a, const float* b, float* c, int64_t m,
                        int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (int64_t t = 0; t < k; ++t) {
      const float av = arow[t];
      const float* brow = b + t * n;
      for (int64_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

// C[k x n] += A^T[k x m] * B[m x n] with A given as [m x k].
inline void gemm_tn_acc(const float* a, const float* b, float* c, int64_t m,
                        int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    const float* brow = b + i * n;
    for (int64_t t = 0; t < k; ++t) {
      const float av = arow[t];
      float* crow = c + t * n;
      for (int64_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

inline void transpose_2d(const float* src, float* dst, int64_t rows,
                         int64_t cols) {
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

inline void accumulate(std::span<float> dst, std::span<const float> src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(a.numel()));
  auto av = a.data(), bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor y(a.shape(), std::move(out), detail::grad_wanted({&a, &b}));
  check_finite("add", y);
  if (y.requires_grad()) {
    Tape::active()->record("add", [a, b, y] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      if (a.requires_grad()) detail::accumulate(a.grad(), g);
      if (b.requires_grad()) detail::accumulate(b.grad(), g);
    });
  }
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(a.numel()));
  auto av = a.data(), bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor y(a.shape(), std::move(out), detail::grad_wanted({&a, &b}));
  check_finite("sub", y);
  if (y.requires_grad()) {
    Tape::active()->record("sub", [a, b, y] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      if (a.requires_grad()) detail::accumulate(a.grad(), g);
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (size_t i = 0; i < bg.size(); ++i) bg[i] -= g[i];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(a.numel()));
  auto av = a.data(), bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor y(a.shape(), std::move(out), detail::grad_wanted({&a, &b}));
  check_finite("mul", y);
  if (y.requires_grad()) {
    Tape::active()->record("mul", [a, b, y] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto av2 = a.data(), bv2 = b.data();
      if (a.requires_grad()) {
        auto ag = a.grad();
        for (size_t i = 0; i < ag.size(); ++i) ag[i] += g[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (size_t i = 0; i < bg.size(); ++i) bg[i] += g[i] * av2[i];
      }
    });
  }
  return y;
}

inline Tensor scale(const Tensor& x, float s) {
  std::vector<float> out(static_cast<size_t>(x.numel()));
  auto xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x}));
  check_finite("scale", y);
  if (y.requires_grad()) {
    Tape::active()->record("scale", [x, y, s] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto xg = x.grad();
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * s;
    });
  }
  return y;
}

inline Tensor relu(const Tensor& x) {
  std::vector<float> out(static_cast<size_t>(x.numel()));
  auto xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x}));
  check_finite("relu", y);
  if (y.requires_grad()) {
    Tape::active()->record("relu", [x, y] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto xv2 = x.data();
      auto xg = x.grad();
      for (size_t i = 0; i < xg.size(); ++i)
        if (xv2[i] > 0.0f) xg[i] += g[i];
    });
  }
  return y;
}

/// Exact Gaussian-CDF form: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.7071067811865475f;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  auto xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    float phi = 0.5f * (1.0f + std::erf(xv[i] * kInvSqrt2));
    out[i] = xv[i] * phi;
  }
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x}));
  check_finite("gelu", y);
  if (y.requires_grad()) {
    Tape::active()->record("gelu", [x, y] {
      if (!y.grad_allocated()) return;
      constexpr float kInvSqrt2Pi = 0.3989422804014327f;
      auto g = y.grad();
      auto xv2 = x.data();
      auto xg = x.grad();
      for (size_t i = 0; i < xg.size(); ++i) {
        float v = xv2[i];
        float cdf = 0.5f * (1.0f + std::erf(v * 0.7071067811865475f));
        float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        xg[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

/// Softmax over the last axis, log-sum-exp stabilized.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1)
    throw ShapeError("softmax: empty reduction axis");
  const int64_t n = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / n;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  auto xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * n;
    float* orow = out.data() + r * n;
    float m = row[0];
    for (int64_t j = 1; j < n; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - m);
      s += orow[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int64_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x}));
  check_finite("softmax", y);
  if (y.requires_grad()) {
    Tape::active()->record("softmax", [x, y, n, rows] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto yv = y.data();
      auto xg = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* yrow = yv.data() + r * n;
        const float* grow = g.data() + r * n;
        float* xrow = xg.data() + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += double(grow[j]) * yrow[j];
        const float d = static_cast<float>(dot);
        for (int64_t j = 0; j < n; ++j) xrow[j] += yrow[j] * (grow[j] - d);
      }
    });
  }
  return y;
}

/// Forward identity; contributes exactly zero gradient to its argument.
inline Tensor stop_gradient(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  return Tensor(x.shape(), std::move(out), false);
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

/// Resolves at most one -1 extent against the element count.
inline Shape resolve_shape(const Shape& requested, int64_t numel) {
  Shape s = requested;
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= s[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || numel % known != 0)
      throw ShapeError("reshape: cannot infer extent for " + shape_str(requested));
    s[static_cast<size_t>(infer)] = numel / known;
  }
  if (shape_numel(s) != numel)
    throw ShapeError("reshape: " + shape_str(requested) + " incompatible with " +
                     std::to_string(numel) + " elements");
  return s;
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  Shape s = resolve_shape(shape, x.numel());
  std::vector<float> out(x.data().begin(), x.data().end());
  Tensor y(std::move(s), std::move(out), detail::grad_wanted({&x}));
  if (y.requires_grad()) {
    Tape::active()->record("reshape", [x, y] {
      if (!y.grad_allocated()) return;
      detail::accumulate(x.grad(), y.grad());
    });
  }
  return y;
}

inline Tensor flatten(const Tensor& x) {
  return reshape(x, {x.dim(0), -1});
}

namespace detail {

inline void permute_copy(const float* src, float* dst, const Shape& in_shape,
                         const std::vector<int>& perm, bool add_into) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  std::vector<int64_t> in_strides(r, 1), out_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  }
  // stride of output axis i in the input layout
  std::vector<int64_t> gather(r);
  for (int i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
  const int64_t total = shape_numel(in_shape);
  std::vector<int64_t> idx(r, 0);
  int64_t src_off = 0;
  for (int64_t flat = 0; flat < total; ++flat) {
    if (add_into)
      dst[flat] += src[src_off];
    else
      dst[flat] = src[src_off];
    for (int axis = r - 1; axis >= 0; --axis) {
      if (++idx[axis] < out_shape[axis]) {
        src_off += gather[axis];
        break;
      }
      idx[axis] = 0;
      src_off -= gather[axis] * (out_shape[axis] - 1);
    }
  }
}

}  // namespace detail

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r)
    throw ShapeError("permute: order has wrong length");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
      throw ShapeError("permute: invalid axis order");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<float> out(static_cast<size_t>(x.numel()));
  detail::permute_copy(x.data().data(), out.data(), x.shape(), perm, false);
  Tensor y(std::move(out_shape), std::move(out), detail::grad_wanted({&x}));
  if (y.requires_grad()) {
    std::vector<int> inv(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) inv[perm[i]] = i;
    Tape::active()->record("permute", [x, y, inv] {
      if (!y.grad_allocated()) return;
      detail::permute_copy(y.grad().data(), x.grad().data(), y.shape(), inv, true);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Matrix product over the trailing two axes. Inputs of rank > 2 must share
/// identical leading extents and are multiplied slice by slice.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
    throw ShapeError("matmul: ranks must match and be >= 2");
  const int r = a.rank();
  for (int i = 0; i < r - 2; ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: leading extents differ at axis " + std::to_string(i));
  const int64_t m = a.dim(r - 2), k = a.dim(r - 1);
  const int64_t kb = b.dim(r - 2), n = b.dim(r - 1);
  if (k != kb)
    throw ShapeError("matmul: inner extents disagree (" + std::to_string(k) +
                     " vs " + std::to_string(kb) + ")");
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= a.dim(i);
  Shape out_shape(a.shape());
  out_shape[static_cast<size_t>(r - 1)] = n;
  std::vector<float> out(static_cast<size_t>(batch * m * n), 0.0f);
  auto av = a.data(), bv = b.data();
  for (int64_t s = 0; s < batch; ++s)
    detail::gemm_nn_acc(av.data() + s * m * k, bv.data() + s * k * n,
                        out.data() + s * m * n, m, k, n);
  Tensor y(std::move(out_shape), std::move(out), detail::grad_wanted({&a, &b}));
  check_finite("matmul", y);
  if (y.requires_grad()) {
    Tape::active()->record("matmul", [a, b, y, batch, m, k, n] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto av2 = a.data(), bv2 = b.data();
      if (a.requires_grad()) {
        auto ag = a.grad();
        std::vector<float> bt(static_cast<size_t>(k * n));
        for (int64_t s = 0; s < batch; ++s) {
          detail::transpose_2d(bv2.data() + s * k * n, bt.data(), k, n);
          detail::gemm_nn_acc(g.data() + s * m * n, bt.data(),
                              ag.data() + s * m * k, m, n, k);
        }
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (int64_t s = 0; s < batch; ++s)
          detail::gemm_tn_acc(av2.data() + s * m * k, g.data() + s * m * n,
                              bg.data() + s * k * n, m, k, n);
      }
    });
  }
  return y;
}

/// x[rows x in] * w[out x in]^T -> [rows x out]. The weight layout matches
/// the layer convention (one row per output unit).
inline Tensor linear(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2)
    throw ShapeError("linear: expected rank-2 input and weights");
  const int64_t rows = x.dim(0), in = x.dim(1);
  const int64_t out_units = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("linear: weight columns " + std::to_string(w.dim(1)) +
                     " do not match input features " + std::to_string(in));
  std::vector<float> wt(static_cast<size_t>(in * out_units));
  detail::transpose_2d(w.data().data(), wt.data(), out_units, in);
  std::vector<float> out(static_cast<size_t>(rows * out_units), 0.0f);
  detail::gemm_nn_acc(x.data().data(), wt.data(), out.data(), rows, in, out_units);
  Tensor y({rows, out_units}, std::move(out), detail::grad_wanted({&x, &w}));
  check_finite("linear", y);
  if (y.requires_grad()) {
    Tape::active()->record("linear", [x, w, y, rows, in, out_units] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      if (x.requires_grad())
        detail::gemm_nn_acc(g.data(), w.data().data(), x.grad().data(), rows,
                            out_units, in);
      if (w.requires_grad())
        detail::gemm_tn_acc(g.data(), x.data().data(), w.grad().data(), rows,
                            out_units, in);
    });
  }
  return y;
}

/// Adds a length-n vector to every trailing row of x (bias broadcast).
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1)
    throw ShapeError("add_bias: bias must be rank 1");
  const int64_t n = b.dim(0);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != n)
    throw ShapeError("add_bias: trailing extent does not match bias length");
  const int64_t rows = x.numel() / n;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  auto xv = x.data(), bv = b.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] + bv[j];
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x, &b}));
  check_finite("add_bias", y);
  if (y.requires_grad()) {
    Tape::active()->record("add_bias", [x, b, y, rows, n] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      if (x.requires_grad()) detail::accumulate(x.grad(), g);
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < n; ++j) bg[j] += g[r * n + j];
      }
    });
  }
  return y;
}

/// Sum of all elements, accumulated in double.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor y = Tensor::scalar(static_cast<float>(acc), detail::grad_wanted({&x}));
  check_finite("sum", y);
  if (y.requires_grad()) {
    Tape::active()->record("sum", [x, y] {
      if (!y.grad_allocated()) return;
      const float g = y.grad()[0];
      auto xg = x.grad();
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += g;
    });
  }
  return y;
}

}  // namespace lowbit
