#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lowbit/ops.hpp"
#include "lowbit/prng.hpp"
#include "lowbit/tensor.hpp"

namespace lowbit {

namespace detail {

// Gathers one sample's same-padded k x k neighborhoods into a
// [H*W x k*k*C] matrix (zero rows for out-of-image taps).
inline void im2col_same(const float* x, float* cols, int64_t h, int64_t w,
                        int64_t c, int64_t k) {
  const int64_t pad = k / 2;
  const int64_t patch = k * k * c;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t xx = 0; xx < w; ++xx) {
      float* dst = cols + (y * w + xx) * patch;
      for (int64_t ky = 0; ky < k; ++ky) {
        const int64_t sy = y + ky - pad;
        for (int64_t kx = 0; kx < k; ++kx) {
          const int64_t sx = xx + kx - pad;
          float* cell = dst + (ky * k + kx) * c;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            for (int64_t ch = 0; ch < c; ++ch) cell[ch] = 0.0f;
          } else {
            const float* src = x + (sy * w + sx) * c;
            for (int64_t ch = 0; ch < c; ++ch) cell[ch] = src[ch];
          }
        }
      }
    }
  }
}

inline void col2im_same_acc(const float* cols, float* x, int64_t h, int64_t w,
                            int64_t c, int64_t k) {
  const int64_t pad = k / 2;
  const int64_t patch = k * k * c;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t xx = 0; xx < w; ++xx) {
      const float* src = cols + (y * w + xx) * patch;
      for (int64_t ky = 0; ky < k; ++ky) {
        const int64_t sy = y + ky - pad;
        if (sy < 0 || sy >= h) continue;
        for (int64_t kx = 0; kx < k; ++kx) {
          const int64_t sx = xx + kx - pad;
          if (sx < 0 || sx >= w) continue;
          const float* cell = src + (ky * k + kx) * c;
          float* dst = x + (sy * w + sx) * c;
          for (int64_t ch = 0; ch < c; ++ch) dst[ch] += cell[ch];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with stride 1 and same padding.
/// x: [batch, h, w, in_ch], w: [out_ch, in_ch, k, k] -> [batch, h, w, out_ch].
inline Tensor conv2d(const Tensor& x, const Tensor& w) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [batch,h,w,ch]");
  if (w.rank() != 4) throw ShapeError("conv2d: weights must be [out,in,k,k]");
  const int64_t batch = x.dim(0), h = x.dim(1), ww = x.dim(2), cin = x.dim(3);
  const int64_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                     " do not match filter channels " + std::to_string(w.dim(1)));
  if (w.dim(3) != k || k % 2 == 0)
    throw ShapeError("conv2d: filters must be square with odd extent");
  if (h < 1 || ww < 1) throw ShapeError("conv2d: empty spatial extent");
  const int64_t patch = k * k * cin;
  const int64_t hw = h * ww;

  // Filter matrix in the im2col order: [k*k*cin x cout].
  std::vector<float> wt(static_cast<size_t>(patch * cout));
  {
    auto wv = w.data();
    for (int64_t o = 0; o < cout; ++o)
      for (int64_t c = 0; c < cin; ++c)
        for (int64_t ky = 0; ky < k; ++ky)
          for (int64_t kx = 0; kx < k; ++kx)
            wt[((ky * k + kx) * cin + c) * cout + o] =
                wv[((o * cin + c) * k + ky) * k + kx];
  }

  std::vector<float> out(static_cast<size_t>(batch * hw * cout), 0.0f);
  std::vector<float> cols(static_cast<size_t>(hw * patch));
  auto xv = x.data();
  for (int64_t s = 0; s < batch; ++s) {
    detail::im2col_same(xv.data() + s * hw * cin, cols.data(), h, ww, cin, k);
    detail::gemm_nn_acc(cols.data(), wt.data(), out.data() + s * hw * cout, hw,
                        patch, cout);
  }
  Tensor y({batch, h, ww, cout}, std::move(out), detail::grad_wanted({&x, &w}));
  check_finite("conv2d", y);
  if (y.requires_grad()) {
    Tape::active()->record("conv2d", [x, w, y, wt, batch, h, ww, cin, cout, k] {
      if (!y.grad_allocated()) return;
      const int64_t patch2 = k * k * cin;
      const int64_t hw2 = h * ww;
      auto g = y.grad();
      auto xv2 = x.data();
      std::vector<float> cols(static_cast<size_t>(hw2 * patch2));
      std::vector<float> dwt;
      if (w.requires_grad()) dwt.assign(static_cast<size_t>(patch2 * cout), 0.0f);
      std::vector<float> wrows;  // [cout x patch] for the input gradient
      if (x.requires_grad()) {
        wrows.resize(static_cast<size_t>(cout * patch2));
        detail::transpose_2d(wt.data(), wrows.data(), patch2, cout);
      }
      std::vector<float> dcols(static_cast<size_t>(hw2 * patch2));
      for (int64_t s = 0; s < batch; ++s) {
        const float* gslice = g.data() + s * hw2 * cout;
        if (w.requires_grad()) {
          detail::im2col_same(xv2.data() + s * hw2 * cin, cols.data(), h, ww,
                              cin, k);
          detail::gemm_tn_acc(cols.data(), gslice, dwt.data(), hw2, patch2, cout);
        }
        if (x.requires_grad()) {
          std::fill(dcols.begin(), dcols.end(), 0.0f);
          detail::gemm_nn_acc(gslice, wrows.data(), dcols.data(), hw2, cout,
                              patch2);
          detail::col2im_same_acc(dcols.data(), x.grad().data() + s * hw2 * cin,
                                  h, ww, cin, k);
        }
      }
      if (w.requires_grad()) {
        auto wg = w.grad();
        for (int64_t o = 0; o < cout; ++o)
          for (int64_t c = 0; c < cin; ++c)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx)
                wg[((o * cin + c) * k + ky) * k + kx] +=
                    dwt[((ky * k + kx) * cin + c) * cout + o];
      }
    });
  }
  return y;
}

/// 2x2 max pooling with stride 2. Gradient routes to the first (row-major)
/// maximal element of each window.
inline Tensor maxpool2x2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2x2: input must be [batch,h,w,ch]");
  const int64_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2x2: spatial extents must be divisible by 2");
  const int64_t oh = h / 2, ow = w / 2;
  std::vector<float> out(static_cast<size_t>(batch * oh * ow * c));
  std::vector<int64_t> argmax(out.size());
  auto xv = x.data();
  for (int64_t s = 0; s < batch; ++s) {
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t xx = 0; xx < ow; ++xx) {
        for (int64_t ch = 0; ch < c; ++ch) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t best_idx = -1;
          for (int64_t dy = 0; dy < 2; ++dy) {
            for (int64_t dx = 0; dx < 2; ++dx) {
              const int64_t idx =
                  ((s * h + (2 * y + dy)) * w + (2 * xx + dx)) * c + ch;
              if (xv[idx] > best) {
                best = xv[idx];
                best_idx = idx;
              }
            }
          }
          const int64_t o = ((s * oh + y) * ow + xx) * c + ch;
          out[o] = best;
          argmax[o] = best_idx;
        }
      }
    }
  }
  Tensor y({batch, oh, ow, c}, std::move(out), detail::grad_wanted({&x}));
  check_finite("maxpool2x2", y);
  if (y.requires_grad()) {
    Tape::active()->record("maxpool2x2", [x, y, argmax = std::move(argmax)] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto xg = x.grad();
      for (size_t i = 0; i < argmax.size(); ++i) xg[argmax[i]] += g[i];
    });
  }
  return y;
}

/// Per-example normalization over the last axis, then a learned elementwise
/// scale and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& shift, float eps = 1e-5f) {
  const int64_t n = x.dim(x.rank() - 1);
  if (n < 1) throw ShapeError("layer_norm: empty feature axis");
  if (gain.numel() != n || shift.numel() != n)
    throw ShapeError("layer_norm: scale/shift length does not match features");
  const int64_t rows = x.numel() / n;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  std::vector<float> xhat(static_cast<size_t>(x.numel()));
  std::vector<float> inv_std(static_cast<size_t>(rows));
  auto xv = x.data();
  auto gv = gain.data(), sv = shift.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= n;
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv_std[r] = inv;
    const float mu = static_cast<float>(mean);
    for (int64_t j = 0; j < n; ++j) {
      const float xh = (row[j] - mu) * inv;
      xhat[r * n + j] = xh;
      out[r * n + j] = xh * gv[j] + sv[j];
    }
  }
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x, &gain, &shift}));
  check_finite("layer_norm", y);
  if (y.requires_grad()) {
    Tape::active()->record(
        "layer_norm",
        [x, gain, shift, y, xhat = std::move(xhat),
         inv_std = std::move(inv_std), rows, n] {
          if (!y.grad_allocated()) return;
          auto g = y.grad();
          auto gv2 = gain.data();
          for (int64_t r = 0; r < rows; ++r) {
            const float* grow = g.data() + r * n;
            const float* xh = xhat.data() + r * n;
            if (gain.requires_grad()) {
              auto gg = gain.grad();
              for (int64_t j = 0; j < n; ++j) gg[j] += grow[j] * xh[j];
            }
            if (shift.requires_grad()) {
              auto sg = shift.grad();
              for (int64_t j = 0; j < n; ++j) sg[j] += grow[j];
            }
            if (x.requires_grad()) {
              double m1 = 0.0, m2 = 0.0;
              for (int64_t j = 0; j < n; ++j) {
                const double gh = double(grow[j]) * gv2[j];
                m1 += gh;
                m2 += gh * xh[j];
              }
              m1 /= n;
              m2 /= n;
              auto xg = x.grad();
              const float inv = inv_std[r];
              for (int64_t j = 0; j < n; ++j) {
                const float gh = grow[j] * gv2[j];
                xg[r * n + j] += inv * (gh - static_cast<float>(m1) -
                                        xh[j] * static_cast<float>(m2));
              }
            }
          }
        });
  }
  return y;
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity outside training.
inline Tensor dropout(const Tensor& x, float rate, Prng& rng, bool training) {
  if (rate < 0.0f || rate >= 1.0f)
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - rate);
  std::vector<float> mask(static_cast<size_t>(x.numel()));
  for (size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng.uniform() < rate ? 0.0f : keep_scale;
  std::vector<float> out(mask.size());
  auto xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  Tensor y(x.shape(), std::move(out), detail::grad_wanted({&x}));
  check_finite("dropout", y);
  if (y.requires_grad()) {
    Tape::active()->record("dropout", [x, y, mask = std::move(mask)] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto xg = x.grad();
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * mask[i];
    });
  }
  return y;
}

/// Splits [batch, h, w, c] into non-overlapping row-major patches:
/// [batch, (h/p)*(w/p), p*p*c].
inline Tensor extract_patches(const Tensor& x, int64_t patch_size) {
  if (x.rank() != 4) throw ShapeError("extract_patches: input must be [batch,h,w,ch]");
  const int64_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (patch_size < 1 || h % patch_size != 0 || w % patch_size != 0)
    throw ShapeError("extract_patches: image extent not divisible by patch size");
  const int64_t ph = h / patch_size, pw = w / patch_size;
  const int64_t num_patches = ph * pw;
  const int64_t dim = patch_size * patch_size * c;
  std::vector<float> out(static_cast<size_t>(batch * num_patches * dim));
  auto xv = x.data();
  for (int64_t s = 0; s < batch; ++s) {
    for (int64_t py = 0; py < ph; ++py) {
      for (int64_t px = 0; px < pw; ++px) {
        float* dst = out.data() + ((s * num_patches + py * pw + px) * dim);
        for (int64_t dy = 0; dy < patch_size; ++dy) {
          const float* src =
              xv.data() + ((s * h + py * patch_size + dy) * w + px * patch_size) * c;
          std::copy(src, src + patch_size * c, dst + dy * patch_size * c);
        }
      }
    }
  }
  Tensor y({batch, num_patches, dim}, std::move(out), detail::grad_wanted({&x}));
  if (y.requires_grad()) {
    Tape::active()->record("extract_patches",
                           [x, y, batch, h, w, c, patch_size, ph, pw, dim] {
      if (!y.grad_allocated()) return;
      auto g = y.grad();
      auto xg = x.grad();
      const int64_t num_patches2 = ph * pw;
      for (int64_t s = 0; s < batch; ++s) {
        for (int64_t py = 0; py < ph; ++py) {
          for (int64_t px = 0; px < pw; ++px) {
            const float* src =
                g.data() + ((s * num_patches2 + py * pw + px) * dim);
            for (int64_t dy = 0; dy < patch_size; ++dy) {
              float* dst = xg.data() +
                           ((s * h + py * patch_size + dy) * w + px * patch_size) * c;
              for (int64_t t = 0; t < patch_size * c; ++t)
                dst[t] += src[dy * patch_size * c + t];
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace lowbit
