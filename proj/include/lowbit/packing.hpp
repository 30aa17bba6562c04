#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "lowbit/models.hpp"
#include "lowbit/quantize.hpp"

namespace lowbit {

struct PackError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// How many base-n_values digits fit in one byte: the largest k with
/// n_values^k <= 256.
inline int weights_per_byte(int n_values) {
  if (n_values < 2 || n_values > 256)
    throw std::invalid_argument("weights_per_byte: n_values must be in [2, 256]");
  int k = 0;
  int64_t pow = 1;
  while (pow * n_values <= 256) {
    pow *= n_values;
    ++k;
  }
  return k;
}

/// Memory reduction factor of packed weights versus 32-bit floats.
inline int memory_reduction(int n_values) { return 4 * weights_per_byte(n_values); }

inline int64_t packed_size(int64_t count, int n_values) {
  const int k = weights_per_byte(n_values);
  return (count + k - 1) / k;
}

/// Packs grid values into bytes, k digits per byte with the first weight in
/// the least significant digit. The final byte is zero-padded in its unused
/// high digits. Every value must lie exactly on the grid.
inline std::vector<uint8_t> pack_layer(std::span<const float> w_q,
                                       const GridSpec& grid) {
  const int n = grid.n_values;
  const int k = weights_per_byte(n);
  std::vector<uint8_t> out(static_cast<size_t>(packed_size(
      static_cast<int64_t>(w_q.size()), n)));
  int64_t byte_idx = 0;
  int digit_pos = 0;
  int64_t place = 1;
  for (size_t i = 0; i < w_q.size(); ++i) {
    const int d = detail::grid_index(w_q[i], grid);
    if (grid.values[static_cast<size_t>(d)] != w_q[i])
      throw PackError("pack: value " + std::to_string(w_q[i]) + " at index " +
                      std::to_string(i) + " is not on the " + std::to_string(n) +
                      "-value grid");
    out[static_cast<size_t>(byte_idx)] =
        static_cast<uint8_t>(out[static_cast<size_t>(byte_idx)] + d * place);
    place *= n;
    if (++digit_pos == k) {
      digit_pos = 0;
      place = 1;
      ++byte_idx;
    }
  }
  return out;
}

inline std::vector<uint8_t> pack_layer(const Tensor& w_q, int n_values) {
  return pack_layer(w_q.data(), grid_values(n_values));
}

/// Exact inverse of pack_layer. Rejects bytes whose decoded digits reach
/// n_values, including nonzero padding digits in the final byte.
inline std::vector<float> unpack_layer(std::span<const uint8_t> bytes,
                                       const GridSpec& grid, int64_t count) {
  const int n = grid.n_values;
  const int k = weights_per_byte(n);
  if (static_cast<int64_t>(bytes.size()) != packed_size(count, n))
    throw PackError("unpack: payload of " + std::to_string(bytes.size()) +
                    " bytes does not match " + std::to_string(count) +
                    " weights at " + std::to_string(k) + " per byte");
  std::vector<float> out(static_cast<size_t>(count));
  for (size_t bi = 0; bi < bytes.size(); ++bi) {
    int64_t rest = bytes[bi];
    const int64_t digits_here =
        std::min<int64_t>(k, count - static_cast<int64_t>(bi) * k);
    for (int64_t j = 0; j < digits_here; ++j) {
      const int64_t d = rest % n;
      rest /= n;
      out[bi * static_cast<size_t>(k) + static_cast<size_t>(j)] =
          grid.values[static_cast<size_t>(d)];
    }
    // Whatever remains encodes digits beyond the declared count (or an
    // overflowing top digit); both mean a corrupt payload.
    if (rest != 0)
      throw PackError("unpack: corrupt byte " + std::to_string(bi) +
                      " decodes a digit >= " + std::to_string(n));
  }
  return out;
}

inline Tensor unpack_layer(std::span<const uint8_t> bytes, int n_values,
                           const Shape& shape) {
  return Tensor(shape, unpack_layer(bytes, grid_values(n_values),
                                    shape_numel(shape)));
}

// ---------------------------------------------------------------------------
// LBQ1 container
// ---------------------------------------------------------------------------

namespace detail {

struct ByteWriter {
  std::vector<uint8_t> buf;
  void u8(uint8_t v) { buf.push_back(v); }
  void u16(uint16_t v) {
    buf.push_back(static_cast<uint8_t>(v & 0xff));
    buf.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void bytes(std::span<const uint8_t> b) { buf.insert(buf.end(), b.begin(), b.end()); }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
};

struct ByteReader {
  std::span<const uint8_t> buf;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > buf.size()) throw PackError("container: truncated file");
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const uint8_t> bytes(size_t n) {
    need(n);
    auto s = buf.subspan(pos, n);
    pos += n;
    return s;
  }
  std::vector<float> floats(size_t n) {
    std::vector<float> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = f32();
    return v;
  }
  bool done() const { return pos == buf.size(); }
};

}  // namespace detail

constexpr char kLbqMagic[4] = {'L', 'B', 'Q', '1'};
constexpr uint16_t kLbqVersion = 1;

/// One decoded container record (header-level view, payload still raw).
struct LbqRecord {
  std::string name;
  Shape dims;
  float gamma = 1.0f;
  std::vector<float> bias;  // empty when absent
  bool has_bias = false;
  std::vector<uint8_t> payload;
};

struct LbqFile {
  ModelKind kind;
  int n_values = 0;  // 0 = full precision
  std::vector<LbqRecord> records;
};

/// Serializes a model. Quantized layers store base-n digits plus the layer's
/// scale; unquantized layers (and every layer of a full-precision model)
/// store raw 32-bit floats. Biases are always raw floats.
inline void save_model(Model& model, const std::string& path) {
  detail::ByteWriter w;
  w.bytes(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(kLbqMagic), 4));
  w.u16(kLbqVersion);
  w.u8(kind_tag(model.config.kind));
  w.u16(static_cast<uint16_t>(model.config.n_values));
  const auto records = model.records();
  w.u32(static_cast<uint32_t>(records.size()));
  const bool quantize_any = model.config.n_values != kFullPrecision;
  for (const LayerRecord& r : records) {
    w.u16(static_cast<uint16_t>(r.name.size()));
    w.bytes(std::span<const uint8_t>(
        reinterpret_cast<const uint8_t*>(r.name.data()), r.name.size()));
    w.u8(static_cast<uint8_t>(r.weights.rank()));
    for (int64_t d : r.weights.shape()) w.u32(static_cast<uint32_t>(d));
    float gamma = 1.0f;
    std::vector<uint8_t> payload;
    if (quantize_any && r.quantized) {
      QuantSpec q;
      const std::optional<FrozenQuant>* frozen = nullptr;
      if (r.dense) {
        q = r.dense->quant;
        frozen = &r.dense->frozen;
      }
      if (r.conv) {
        q = r.conv->quant;
        frozen = &r.conv->frozen;
      }
      if (frozen && *frozen) {
        // a loaded model carries no meaningful masters; write its frozen
        // grid weights back out unchanged
        gamma = (*frozen)->gamma;
        payload = pack_layer((*frozen)->w_q.data(), grid_values(q.n_values));
      } else {
        auto [wq, g] = quantize(r.weights, q.n_values, q.beta, q.mean_mode);
        gamma = g;
        payload = pack_layer(wq.data(), grid_values(q.n_values));
      }
    } else {
      detail::ByteWriter pw;
      pw.floats(r.weights.data());
      payload = std::move(pw.buf);
    }
    w.f32(gamma);
    w.u8(r.bias.defined() ? 1 : 0);
    if (r.bias.defined()) w.floats(r.bias.data());
    w.u32(static_cast<uint32_t>(payload.size()));
    w.bytes(payload);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw PackError("cannot write model file: " + path);
  f.write(reinterpret_cast<const char*>(w.buf.data()),
          static_cast<std::streamsize>(w.buf.size()));
  if (!f) throw PackError("failed writing model file: " + path);
}

/// Parses an LBQ1 file into records without instantiating a model.
inline LbqFile read_lbq(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PackError("cannot open model file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  detail::ByteReader r{bytes};
  auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), kLbqMagic, 4) != 0)
    throw PackError("container: bad magic (not an LBQ1 file)");
  const uint16_t version = r.u16();
  if (version != kLbqVersion)
    throw PackError("container: unsupported version " + std::to_string(version));
  LbqFile file;
  file.kind = kind_from_tag(r.u8());
  file.n_values = r.u16();
  const uint32_t layer_count = r.u32();
  for (uint32_t i = 0; i < layer_count; ++i) {
    LbqRecord rec;
    const uint16_t name_len = r.u16();
    auto name_bytes = r.bytes(name_len);
    rec.name.assign(reinterpret_cast<const char*>(name_bytes.data()), name_len);
    const uint8_t rank = r.u8();
    for (uint8_t d = 0; d < rank; ++d) rec.dims.push_back(r.u32());
    rec.gamma = r.f32();
    rec.has_bias = r.u8() != 0;
    if (rec.has_bias) {
      // Bias length is the layer's leading extent (output units/channels).
      if (rec.dims.empty()) throw PackError("container: bias on rank-0 record");
      rec.bias = r.floats(static_cast<size_t>(rec.dims[0]));
    }
    const uint32_t payload_len = r.u32();
    auto payload = r.bytes(payload_len);
    rec.payload.assign(payload.begin(), payload.end());
    file.records.push_back(std::move(rec));
  }
  if (!r.done()) throw PackError("container: trailing bytes after last record");
  return file;
}

/// Rebuilds an inference-only model from a container. Quantized layers are
/// frozen to their stored grid values and scale so the loaded model's
/// forward pass reproduces the source model's bit for bit.
inline std::unique_ptr<Model> load_model(const std::string& path) {
  LbqFile file = read_lbq(path);
  ModelConfig cfg;
  cfg.kind = file.kind;
  cfg.n_values = file.n_values;
  for (const LbqRecord& rec : file.records)
    if (rec.dims.size() == 4) {
      cfg.conv_filter_size = static_cast<int>(rec.dims[2]);
      break;
    }
  std::unique_ptr<Model> model = build_model(cfg);
  auto records = model->records();
  if (records.size() != file.records.size())
    throw PackError("container: layer count does not match the " +
                    std::string(kind_name(cfg.kind)) + " architecture");
  const bool quantize_any = cfg.n_values != kFullPrecision;
  for (size_t i = 0; i < records.size(); ++i) {
    LayerRecord& mr = records[i];
    const LbqRecord& fr = file.records[i];
    if (mr.name != fr.name)
      throw PackError("container: record '" + fr.name + "' does not match layer '" +
                      mr.name + "'");
    if (mr.weights.shape() != fr.dims)
      throw PackError("container: dims mismatch for record '" + fr.name + "'");
    const int64_t count = mr.weights.numel();
    if (quantize_any && mr.quantized) {
      const GridSpec grid = grid_values(cfg.n_values);
      std::vector<float> wq = unpack_layer(fr.payload, grid, count);
      FrozenQuant frozen{Tensor(mr.weights.shape(), std::move(wq)), fr.gamma};
      if (mr.dense) mr.dense->frozen = frozen;
      if (mr.conv) mr.conv->frozen = frozen;
    } else {
      if (fr.payload.size() != static_cast<size_t>(count) * 4)
        throw PackError("container: raw payload size mismatch for '" + fr.name + "'");
      detail::ByteReader pr{fr.payload};
      auto dst = mr.weights.data_mut();
      for (int64_t t = 0; t < count; ++t) dst[static_cast<size_t>(t)] = pr.f32();
    }
    if (mr.bias.defined() != fr.has_bias)
      throw PackError("container: bias presence mismatch for '" + fr.name + "'");
    if (fr.has_bias) {
      if (fr.bias.size() != static_cast<size_t>(mr.bias.numel()))
        throw PackError("container: bias length mismatch for '" + fr.name + "'");
      auto dst = mr.bias.data_mut();
      std::copy(fr.bias.begin(), fr.bias.end(), dst.begin());
    }
  }
  model->inference_only = true;
  return model;
}

}  // namespace lowbit
