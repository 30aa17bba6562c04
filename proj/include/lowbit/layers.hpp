#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "lowbit/init.hpp"
#include "lowbit/nn_ops.hpp"
#include "lowbit/ops.hpp"
#include "lowbit/quantize.hpp"

namespace lowbit {

enum class Activation { Linear, Relu, Gelu, Softmax };

inline Tensor apply_activation(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::Linear: return x;
    case Activation::Relu: return relu(x);
    case Activation::Gelu: return gelu(x);
    case Activation::Softmax: return softmax_lastdim(x);
  }
  throw std::logic_error("unknown activation");
}

/// Quantization settings carried by a weight-bearing layer.
/// n_values == 0 means full 32-bit weights (no quantization path at all).
struct QuantSpec {
  int n_values = 0;
  float beta = 1.4f;
  MeanMode mean_mode = MeanMode::Abs;
  bool active() const { return n_values != 0; }
};

/// Grid weights and scale fixed at load time; a frozen layer never consults
/// its master weights, so a packed model reproduces its source bit for bit.
struct FrozenQuant {
  Tensor w_q;
  float gamma = 1.0f;
};

namespace detail {

/// gamma * W_q for the current mode. Training mode routes the gradient to the
/// 32-bit masters through the straight-through estimator; inference mode and
/// frozen layers use plain quantization with no tape interaction.
inline Tensor effective_weights(const Tensor& w, const QuantSpec& q,
                                const std::optional<FrozenQuant>& frozen,
                                bool training) {
  if (frozen) return scale(frozen->w_q, frozen->gamma);
  if (!q.active()) return w;
  if (training) {
    auto [wq, gamma] = quantize_ste(w, q.n_values, q.beta, q.mean_mode);
    return scale(wq, gamma);
  }
  auto [wq, gamma] = quantize(w, q.n_values, q.beta, q.mean_mode);
  return scale(wq, gamma);
}

}  // namespace detail

/// Fully connected layer. Masters are W[out x in] (Glorot uniform) and an
/// optional 32-bit bias (zeros); the forward pass computes
/// activation(gamma * W_q * x + b) with W_q recomputed from the masters on
/// every call.
struct Dense {
  std::string name;
  Tensor w;  // [out, in]
  Tensor b;  // [out]; undefined when use_bias = false
  Activation act = Activation::Linear;
  QuantSpec quant;
  std::optional<FrozenQuant> frozen;

  static Dense create(std::string name, int64_t in, int64_t out, Activation act,
                      QuantSpec quant, bool use_bias, Prng rng) {
    Dense d;
    d.name = std::move(name);
    d.w = glorot_uniform(in, out, {out, in}, rng);
    if (use_bias) d.b = Tensor::zeros({out}, true);
    d.act = act;
    d.quant = quant;
    return d;
  }

  /// Accepts [rows, in] or any higher-rank input whose trailing extent is
  /// `in`; leading extents pass through unchanged.
  Tensor forward(const Tensor& x, bool training) const {
    const int64_t in = w.dim(1);
    Tensor x2 = x;
    Shape lead;
    if (x.rank() != 2) {
      if (x.dim(x.rank() - 1) != in)
        throw ShapeError(name + ": trailing extent does not match input features");
      lead = x.shape();
      lead.pop_back();
      x2 = reshape(x, {-1, in});
    }
    Tensor eff = detail::effective_weights(w, quant, frozen, training);
    Tensor pre = linear(x2, eff);
    if (b.defined()) pre = add_bias(pre, b);
    Tensor out = apply_activation(pre, act);
    if (!lead.empty()) {
      Shape full = lead;
      full.push_back(w.dim(0));
      out = reshape(out, full);
    }
    return out;
  }
};

/// Same-padding stride-1 convolution with quantized filters and 32-bit bias.
struct Conv2dLayer {
  std::string name;
  Tensor w;  // [out_ch, in_ch, k, k]
  Tensor b;  // [out_ch]
  Activation act = Activation::Relu;
  QuantSpec quant;
  std::optional<FrozenQuant> frozen;

  static Conv2dLayer create(std::string name, int64_t in_ch, int64_t out_ch,
                            int64_t k, Activation act, QuantSpec quant,
                            Prng rng) {
    Conv2dLayer c;
    c.name = std::move(name);
    // Receptive-field fans, the standard Glorot convention for filters.
    c.w = glorot_uniform(in_ch * k * k, out_ch * k * k, {out_ch, in_ch, k, k}, rng);
    c.b = Tensor::zeros({out_ch}, true);
    c.act = act;
    c.quant = quant;
    return c;
  }

  Tensor forward(const Tensor& x, bool training) const {
    Tensor eff = detail::effective_weights(w, quant, frozen, training);
    Tensor pre = conv2d(x, eff);
    if (b.defined()) pre = add_bias(pre, b);
    return apply_activation(pre, act);
  }
};

/// Learned elementwise scale (ones) and shift (zeros) after per-example
/// normalization. Always 32-bit.
struct LayerNormLayer {
  std::string name;
  Tensor gain;
  Tensor shift;
  float eps = 1e-5f;

  static LayerNormLayer create(std::string name, int64_t features) {
    LayerNormLayer l;
    l.name = std::move(name);
    l.gain = Tensor::full({features}, 1.0f, true);
    l.shift = Tensor::zeros({features}, true);
    return l;
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, shift, eps); }
};

/// Linear patch projection plus learned positional embeddings, both 32-bit.
struct PatchEncoder {
  Dense proj;       // patch_dim -> emb_dim, linear, with bias
  Tensor pos;       // [num_patches, emb_dim]
  int64_t num_patches = 0;
  int64_t emb_dim = 0;

  static PatchEncoder create(int64_t patch_dim, int64_t num_patches,
                             int64_t emb_dim, Prng rng) {
    PatchEncoder p;
    p.proj = Dense::create("patch_proj", patch_dim, emb_dim, Activation::Linear,
                           QuantSpec{}, true, rng.split(0));
    Prng pos_rng = rng.split(1);
    p.pos = uniform_init({num_patches, emb_dim}, -0.05f, 0.05f, pos_rng);
    p.num_patches = num_patches;
    p.emb_dim = emb_dim;
    return p;
  }

  /// patches: [batch, num_patches, patch_dim] -> [batch, num_patches, emb_dim]
  Tensor forward(const Tensor& patches, bool training) const {
    if (patches.rank() != 3 || patches.dim(1) != num_patches)
      throw ShapeError("patch_encoder: unexpected patch layout");
    Tensor enc = proj.forward(patches, training);
    // Broadcast the positional table over the batch by treating each sample
    // as one long row.
    const int64_t batch = enc.dim(0);
    Tensor flat = reshape(enc, {batch, num_patches * emb_dim});
    Tensor pos_row = reshape(pos, {num_patches * emb_dim});
    Tensor out = add_bias(flat, pos_row);
    return reshape(out, {batch, num_patches, emb_dim});
  }
};

/// Multi-head self-attention with quantized no-bias projections. Softmax,
/// scaling, and the probability dropout run at full precision.
struct MultiHeadAttention {
  std::string name;
  Dense q_proj, k_proj, v_proj, out_proj;
  int64_t emb_dim = 0;
  int64_t num_heads = 0;
  float dropout_rate = 0.0f;

  static MultiHeadAttention create(std::string name, int64_t emb_dim,
                                   int64_t num_heads, float dropout_rate,
                                   QuantSpec quant, Prng rng) {
    if (num_heads < 1 || emb_dim % num_heads != 0)
      throw ShapeError("attention: emb_dim must be divisible by num_heads");
    MultiHeadAttention a;
    a.name = std::move(name);
    a.q_proj = Dense::create(a.name + "/q", emb_dim, emb_dim, Activation::Linear,
                             quant, false, rng.split(0));
    a.k_proj = Dense::create(a.name + "/k", emb_dim, emb_dim, Activation::Linear,
                             quant, false, rng.split(1));
    a.v_proj = Dense::create(a.name + "/v", emb_dim, emb_dim, Activation::Linear,
                             quant, false, rng.split(2));
    a.out_proj = Dense::create(a.name + "/out", emb_dim, emb_dim,
                               Activation::Linear, quant, false, rng.split(3));
    a.emb_dim = emb_dim;
    a.num_heads = num_heads;
    a.dropout_rate = dropout_rate;
    return a;
  }

  /// Self-attention over x: [batch, seq, emb_dim] -> same shape.
  Tensor forward(const Tensor& x, bool training, Prng* rng) const {
    const int64_t batch = x.dim(0), seq = x.dim(1);
    const int64_t n_key = emb_dim / num_heads;
    auto split_heads = [&](const Tensor& t) {
      return permute(reshape(t, {batch, seq, num_heads, n_key}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(q_proj.forward(x, training));
    Tensor k = split_heads(k_proj.forward(x, training));
    Tensor v = split_heads(v_proj.forward(x, training));
    Tensor scores = scale(matmul(q, permute(k, {0, 1, 3, 2})),
                          1.0f / std::sqrt(static_cast<float>(n_key)));
    Tensor probs = softmax_lastdim(scores);
    if (training && dropout_rate > 0.0f) {
      if (!rng) throw std::invalid_argument("attention: training forward needs a generator");
      probs = dropout(probs, dropout_rate, *rng, true);
    }
    Tensor ctx = matmul(probs, v);
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {batch, seq, num_heads * n_key});
    return out_proj.forward(ctx, training);
  }
};

}  // namespace lowbit
