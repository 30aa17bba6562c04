#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowbit/layers.hpp"

namespace lowbit {

enum class ModelKind { FCNN1, FCNN2, CVNN1, CVNN2, VIT1, VIT2 };

inline const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::FCNN1: return "FCNN1";
    case ModelKind::FCNN2: return "FCNN2";
    case ModelKind::CVNN1: return "CVNN1";
    case ModelKind::CVNN2: return "CVNN2";
    case ModelKind::VIT1: return "VIT1";
    case ModelKind::VIT2: return "VIT2";
  }
  throw std::logic_error("unknown model kind");
}

inline ModelKind kind_from_name(const std::string& s) {
  if (s == "FCNN1") return ModelKind::FCNN1;
  if (s == "FCNN2") return ModelKind::FCNN2;
  if (s == "CVNN1") return ModelKind::CVNN1;
  if (s == "CVNN2") return ModelKind::CVNN2;
  if (s == "VIT1") return ModelKind::VIT1;
  if (s == "VIT2") return ModelKind::VIT2;
  throw std::invalid_argument("unknown model kind: " + s);
}

inline uint8_t kind_tag(ModelKind k) { return static_cast<uint8_t>(k) + 1; }
inline ModelKind kind_from_tag(uint8_t t) {
  if (t < 1 || t > 6) throw std::invalid_argument("bad model kind tag");
  return static_cast<ModelKind>(t - 1);
}

/// n_values == 0 builds the 32-bit baseline.
constexpr int kFullPrecision = 0;

struct ModelConfig {
  ModelKind kind = ModelKind::FCNN1;
  int n_values = kFullPrecision;
  float beta = 1.4f;
  MeanMode mean_mode = MeanMode::Abs;
  int conv_filter_size = 3;
  uint64_t seed = 0;
};

/// One entry of a model's parameter inventory: a weight tensor, its optional
/// 32-bit bias, and whether the weights are quantized. The owner pointers let
/// the container loader freeze grid weights in place.
struct LayerRecord {
  std::string name;
  Tensor weights;
  Tensor bias;  // undefined when the layer has none
  bool quantized = false;
  Dense* dense = nullptr;
  Conv2dLayer* conv = nullptr;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : config(cfg) {}
  virtual ~Model() = default;

  /// x: [batch, 32, 32, 3] -> class probabilities [batch, 10].
  virtual Tensor forward(const Tensor& x, bool training, Prng* rng) = 0;

  /// Ordered parameter inventory; order is the serialization order.
  virtual std::vector<LayerRecord> records() = 0;

  ModelConfig config;
  bool inference_only = false;
};

struct ParamCounts {
  int64_t total = 0;
  int64_t quantized = 0;
  int64_t bias = 0;
};

inline ParamCounts param_count(Model& m) {
  ParamCounts c;
  for (const LayerRecord& r : m.records()) {
    c.total += r.weights.numel();
    if (r.quantized) c.quantized += r.weights.numel();
    if (r.bias.defined()) {
      c.total += r.bias.numel();
      c.bias += r.bias.numel();
    }
  }
  return c;
}

namespace detail {

inline void check_image_input(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != 32 || x.dim(2) != 32 || x.dim(3) != 3)
    throw ShapeError("model: expected input [batch, 32, 32, 3], got " +
                     shape_str(x.shape()));
}

}  // namespace detail

/// Fully connected stacks: 3072 -> hidden units (relu) -> 10 (softmax).
class FcnnModel : public Model {
 public:
  FcnnModel(ModelConfig cfg, const std::vector<int64_t>& units) : Model(cfg) {
    QuantSpec q{cfg.n_values, cfg.beta, cfg.mean_mode};
    Prng rng(cfg.seed);
    int64_t in = 3072;
    int idx = 0;
    for (size_t i = 0; i < units.size(); ++i) {
      const bool last = i + 1 == units.size();
      fc_.push_back(Dense::create("fc" + std::to_string(i + 1), in, units[i],
                                  last ? Activation::Softmax : Activation::Relu,
                                  q, true, rng.split(stream::kWeightInit, idx++)));
      in = units[i];
    }
  }

  Tensor forward(const Tensor& x, bool training, Prng*) override {
    detail::check_image_input(x);
    Tensor h = flatten(x);
    for (const Dense& d : fc_) h = d.forward(h, training);
    return h;
  }

  std::vector<LayerRecord> records() override {
    std::vector<LayerRecord> rs;
    for (Dense& d : fc_)
      rs.push_back({d.name, d.w, d.b, d.quant.active(), &d, nullptr});
    return rs;
  }

 private:
  std::vector<Dense> fc_;
};

/// Convolutional stacks with 2x2 pooling and a fully connected head.
class CvnnModel : public Model {
 public:
  CvnnModel(ModelConfig cfg, const std::vector<int64_t>& conv_channels,
            const std::vector<bool>& pool_after,
            const std::vector<int64_t>& fc_units)
      : Model(cfg), pool_after_(pool_after) {
    if (cfg.conv_filter_size != 3 && cfg.conv_filter_size != 5)
      throw std::invalid_argument("conv filter size must be 3 or 5");
    QuantSpec q{cfg.n_values, cfg.beta, cfg.mean_mode};
    Prng rng(cfg.seed);
    int idx = 0;
    int64_t in_ch = 3;
    for (size_t i = 0; i < conv_channels.size(); ++i) {
      conv_.push_back(Conv2dLayer::create(
          "conv" + std::to_string(i + 1), in_ch, conv_channels[i],
          cfg.conv_filter_size, Activation::Relu, q,
          rng.split(stream::kWeightInit, idx++)));
      in_ch = conv_channels[i];
    }
    int64_t spatial = 32;
    for (bool p : pool_after_)
      if (p) spatial /= 2;
    int64_t in = spatial * spatial * in_ch;
    for (size_t i = 0; i < fc_units.size(); ++i) {
      const bool last = i + 1 == fc_units.size();
      fc_.push_back(Dense::create("fc" + std::to_string(i + 1), in, fc_units[i],
                                  last ? Activation::Softmax : Activation::Relu,
                                  q, true, rng.split(stream::kWeightInit, idx++)));
      in = fc_units[i];
    }
  }

  Tensor forward(const Tensor& x, bool training, Prng*) override {
    detail::check_image_input(x);
    Tensor h = x;
    for (size_t i = 0; i < conv_.size(); ++i) {
      h = conv_[i].forward(h, training);
      if (pool_after_[i]) h = maxpool2x2(h);
    }
    h = flatten(h);
    for (const Dense& d : fc_) h = d.forward(h, training);
    return h;
  }

  std::vector<LayerRecord> records() override {
    std::vector<LayerRecord> rs;
    for (Conv2dLayer& c : conv_)
      rs.push_back({c.name, c.w, c.b, c.quant.active(), nullptr, &c});
    for (Dense& d : fc_)
      rs.push_back({d.name, d.w, d.b, d.quant.active(), &d, nullptr});
    return rs;
  }

 private:
  std::vector<Conv2dLayer> conv_;
  std::vector<bool> pool_after_;
  std::vector<Dense> fc_;
};

/// Patch-based transformer classifier. Quantization applies to the fully
/// connected layers (attention projections, block MLPs, head); the patch
/// encoder, positional embeddings, and normalization layers stay 32-bit.
class VitModel : public Model {
 public:
  VitModel(ModelConfig cfg, int64_t num_blocks,
           const std::vector<int64_t>& mlp_head_units)
      : Model(cfg), num_blocks_(num_blocks) {
    QuantSpec q{cfg.n_values, cfg.beta, cfg.mean_mode};
    Prng rng(cfg.seed);
    int idx = 0;
    auto next = [&] { return rng.split(stream::kWeightInit, idx++); };

    encoder_ = PatchEncoder::create(kPatchDim, kNumPatches, kEmbDim, next());
    for (int64_t b = 0; b < num_blocks_; ++b) {
      Block blk;
      const std::string base = "block" + std::to_string(b + 1);
      blk.ln1 = LayerNormLayer::create(base + "/ln1", kEmbDim);
      blk.attn = MultiHeadAttention::create(base + "/attn", kEmbDim, kNumHeads,
                                            kBlockDropout, q, next());
      blk.ln2 = LayerNormLayer::create(base + "/ln2", kEmbDim);
      blk.mlp1 = Dense::create(base + "/mlp1", kEmbDim, kTransformerUnits0,
                               Activation::Gelu, q, true, next());
      blk.mlp2 = Dense::create(base + "/mlp2", kTransformerUnits0,
                               kTransformerUnits1, Activation::Gelu, q, true,
                               next());
      blocks_.push_back(std::move(blk));
    }
    final_ln_ = LayerNormLayer::create("final_ln", kEmbDim);
    int64_t in = kNumPatches * kEmbDim;
    head1_ = Dense::create("head1", in, mlp_head_units[0], Activation::Gelu, q,
                           true, next());
    head2_ = Dense::create("head2", mlp_head_units[0], mlp_head_units[1],
                           Activation::Gelu, q, true, next());
    classifier_ = Dense::create("classifier", mlp_head_units[1], 10,
                                Activation::Softmax, q, true, next());
  }

  Tensor forward(const Tensor& x, bool training, Prng* rng) override {
    detail::check_image_input(x);
    if (training && !rng)
      throw std::invalid_argument("vit: training forward needs a generator");
    Tensor patches = extract_patches(x, kPatchSize);
    Tensor enc = encoder_.forward(patches, training);
    for (Block& blk : blocks_) {
      Tensor x1 = blk.ln1.forward(enc);
      Tensor att = blk.attn.forward(x1, training, rng);
      Tensor x2 = add(att, enc);
      Tensor h = blk.ln2.forward(x2);
      h = blk.mlp1.forward(h, training);
      if (training) h = dropout(h, kBlockDropout, *rng, true);
      h = blk.mlp2.forward(h, training);
      if (training) h = dropout(h, kBlockDropout, *rng, true);
      enc = add(h, x2);
    }
    Tensor rep = final_ln_.forward(enc);
    rep = flatten(rep);
    if (training) rep = dropout(rep, kHeadDropout, *rng, true);
    Tensor f = head1_.forward(rep, training);
    if (training) f = dropout(f, kHeadDropout, *rng, true);
    f = head2_.forward(f, training);
    if (training) f = dropout(f, kHeadDropout, *rng, true);
    return classifier_.forward(f, training);
  }

  std::vector<LayerRecord> records() override {
    std::vector<LayerRecord> rs;
    rs.push_back({encoder_.proj.name, encoder_.proj.w, encoder_.proj.b, false,
                  &encoder_.proj, nullptr});
    rs.push_back({"pos_embed", encoder_.pos, Tensor(), false, nullptr, nullptr});
    for (Block& blk : blocks_) {
      rs.push_back({blk.ln1.name, blk.ln1.gain, blk.ln1.shift, false, nullptr,
                    nullptr});
      for (Dense* d : {&blk.attn.q_proj, &blk.attn.k_proj, &blk.attn.v_proj,
                       &blk.attn.out_proj})
        rs.push_back({d->name, d->w, d->b, d->quant.active(), d, nullptr});
      rs.push_back({blk.ln2.name, blk.ln2.gain, blk.ln2.shift, false, nullptr,
                    nullptr});
      rs.push_back({blk.mlp1.name, blk.mlp1.w, blk.mlp1.b,
                    blk.mlp1.quant.active(), &blk.mlp1, nullptr});
      rs.push_back({blk.mlp2.name, blk.mlp2.w, blk.mlp2.b,
                    blk.mlp2.quant.active(), &blk.mlp2, nullptr});
    }
    rs.push_back({final_ln_.name, final_ln_.gain, final_ln_.shift, false,
                  nullptr, nullptr});
    for (Dense* d : {&head1_, &head2_, &classifier_})
      rs.push_back({d->name, d->w, d->b, d->quant.active(), d, nullptr});
    return rs;
  }

  static constexpr int64_t kPatchSize = 4;
  static constexpr int64_t kNumPatches = 64;  // (32 / 4)^2
  static constexpr int64_t kPatchDim = 48;    // 4 * 4 * 3
  static constexpr int64_t kEmbDim = 64;
  static constexpr int64_t kNumHeads = 4;
  static constexpr int64_t kTransformerUnits0 = 128;
  static constexpr int64_t kTransformerUnits1 = 64;
  static constexpr float kBlockDropout = 0.1f;
  static constexpr float kHeadDropout = 0.5f;

 private:
  struct Block {
    LayerNormLayer ln1;
    MultiHeadAttention attn;
    LayerNormLayer ln2;
    Dense mlp1, mlp2;
  };

  int64_t num_blocks_;
  PatchEncoder encoder_;
  std::vector<Block> blocks_;
  LayerNormLayer final_ln_;
  Dense head1_, head2_, classifier_;
};

inline std::unique_ptr<Model> build_model(const ModelConfig& cfg) {
  if (cfg.n_values != kFullPrecision && cfg.n_values < 2)
    throw std::invalid_argument("n_values must be >= 2 (or 0 for full precision)");
  switch (cfg.kind) {
    case ModelKind::FCNN1:
      return std::make_unique<FcnnModel>(cfg, std::vector<int64_t>{512, 256, 128, 10});
    case ModelKind::FCNN2:
      return std::make_unique<FcnnModel>(
          cfg, std::vector<int64_t>{1024, 512, 256, 128, 10});
    case ModelKind::CVNN1:
      return std::make_unique<CvnnModel>(
          cfg, std::vector<int64_t>{64, 128, 256},
          std::vector<bool>{true, true, true}, std::vector<int64_t>{128, 10});
    case ModelKind::CVNN2:
      return std::make_unique<CvnnModel>(
          cfg, std::vector<int64_t>{128, 128, 256, 256, 512, 512},
          std::vector<bool>{false, true, false, true, false, true},
          std::vector<int64_t>{512, 10});
    case ModelKind::VIT1:
      return std::make_unique<VitModel>(cfg, 2, std::vector<int64_t>{1024, 512});
    case ModelKind::VIT2:
      return std::make_unique<VitModel>(cfg, 4, std::vector<int64_t>{2048, 1024});
  }
  throw std::invalid_argument("invalid model kind");
}

}  // namespace lowbit
