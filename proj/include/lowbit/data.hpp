#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "lowbit/prng.hpp"
#include "lowbit/tensor.hpp"

namespace lowbit {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int64_t kImageH = 32;
constexpr int64_t kImageW = 32;
constexpr int64_t kImageC = 3;
constexpr int64_t kImagePixels = kImageH * kImageW * kImageC;  // 3072
constexpr int64_t kRecordBytes = 1 + kImagePixels;             // 3073
constexpr int kNumClasses = 10;

/// Labeled images scaled to [0, 1], stored [n, 32, 32, 3].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string split;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }

  std::span<const float> image(int64_t i) const {
    return data_slice(i);
  }

 private:
  std::span<const float> data_slice(int64_t i) const {
    return images.data().subspan(static_cast<size_t>(i * kImagePixels),
                                 static_cast<size_t>(kImagePixels));
  }
};

namespace detail {

/// One record = 1 label byte + 3072 pixel bytes, channel-planar
/// (all red, all green, all blue), each plane row-major.
inline void decode_record(const unsigned char* rec, float* img, int* label,
                          const std::string& file, int64_t index) {
  const int lab = rec[0];
  if (lab > 9)
    throw DataError(file + ": record " + std::to_string(index) +
                    " has label " + std::to_string(lab) + " > 9");
  *label = lab;
  constexpr float inv = 1.0f / 255.0f;
  for (int64_t y = 0; y < kImageH; ++y)
    for (int64_t x = 0; x < kImageW; ++x)
      for (int64_t c = 0; c < kImageC; ++c)
        img[(y * kImageW + x) * kImageC + c] =
            static_cast<float>(rec[1 + c * kImageH * kImageW + y * kImageW + x]) *
            inv;
}

inline void encode_record(const float* img, int label, unsigned char* rec) {
  rec[0] = static_cast<unsigned char>(label);
  for (int64_t y = 0; y < kImageH; ++y)
    for (int64_t x = 0; x < kImageW; ++x)
      for (int64_t c = 0; c < kImageC; ++c) {
        float v = img[(y * kImageW + x) * kImageC + c] * 255.0f;
        v = std::clamp(std::round(v), 0.0f, 255.0f);
        rec[1 + c * kImageH * kImageW + y * kImageW + x] =
            static_cast<unsigned char>(v);
      }
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing dataset file: " + path);
  f.seekg(0, std::ios::end);
  const auto size = static_cast<size_t>(f.tellg());
  f.seekg(0);
  std::vector<unsigned char> bytes(size);
  if (size) f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!f) throw DataError("failed reading dataset file: " + path);
  return bytes;
}

}  // namespace detail

/// Reads one batch file of 3073-byte records. A standard batch file holds
/// 10,000 records (30,730,000 bytes); any other multiple of 3073 is accepted
/// so reduced-size stand-ins in the same layout load through the same path.
inline void load_batch_file(const std::string& path,
                            std::vector<float>& images,
                            std::vector<int>& labels) {
  const std::vector<unsigned char> bytes = detail::read_file(path);
  if (bytes.empty() || bytes.size() % kRecordBytes != 0)
    throw DataError(path + ": truncated file (" + std::to_string(bytes.size()) +
                    " bytes is not a multiple of the 3073-byte record; a "
                    "standard batch is 30,730,000 bytes)");
  const int64_t n = static_cast<int64_t>(bytes.size()) / kRecordBytes;
  const size_t base = images.size();
  images.resize(base + static_cast<size_t>(n * kImagePixels));
  labels.reserve(labels.size() + static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int label = 0;
    detail::decode_record(bytes.data() + i * kRecordBytes,
                          images.data() + base + i * kImagePixels, &label, path, i);
    labels.push_back(label);
  }
}

/// Loads the six standard binary batch files from `dir`:
/// data_batch_1..5.bin for training and test_batch.bin for testing.
inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset train, test;
  train.split = "train";
  test.split = "test";
  std::vector<float> timg;
  std::vector<int> tlab;
  for (int b = 1; b <= 5; ++b)
    load_batch_file((fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string(),
                    timg, tlab);
  train.images = Tensor({static_cast<int64_t>(tlab.size()), kImageH, kImageW, kImageC},
                        std::move(timg));
  train.labels = std::move(tlab);
  std::vector<float> vimg;
  std::vector<int> vlab;
  load_batch_file((fs::path(dir) / "test_batch.bin").string(), vimg, vlab);
  test.images = Tensor({static_cast<int64_t>(vlab.size()), kImageH, kImageW, kImageC},
                       std::move(vimg));
  test.labels = std::move(vlab);
  return {std::move(train), std::move(test)};
}

/// Writes a dataset in the binary batch layout. `paths` receives the records
/// split as evenly as possible, in order.
inline void write_cifar10_file(const Dataset& ds, const std::string& path,
                               int64_t first, int64_t count) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write dataset file: " + path);
  std::vector<unsigned char> rec(static_cast<size_t>(kRecordBytes));
  for (int64_t i = first; i < first + count; ++i) {
    detail::encode_record(ds.image(i).data(), ds.labels[static_cast<size_t>(i)],
                          rec.data());
    f.write(reinterpret_cast<const char*>(rec.data()), kRecordBytes);
  }
  if (!f) throw DataError("failed writing dataset file: " + path);
}

/// Writes train/test datasets as the standard six-file directory.
inline void write_cifar10_dir(const Dataset& train, const Dataset& test,
                              const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int64_t n = train.size();
  const int64_t per = n / 5;
  int64_t off = 0;
  for (int b = 1; b <= 5; ++b) {
    const int64_t count = (b == 5) ? n - off : per;
    write_cifar10_file(train,
                       (fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string(),
                       off, count);
    off += count;
  }
  write_cifar10_file(test, (fs::path(dir) / "test_batch.bin").string(), 0,
                     test.size());
}

/// Keeps the first n training records (0 keeps everything).
inline Dataset dataset_prefix(const Dataset& ds, int64_t n) {
  if (n <= 0 || n >= ds.size()) return ds;
  Dataset out;
  out.split = ds.split;
  auto src = ds.images.data();
  std::vector<float> img(src.begin(), src.begin() + n * kImagePixels);
  out.images = Tensor({n, kImageH, kImageW, kImageC}, std::move(img));
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + n);
  return out;
}

/// Deterministic synthetic classification set: each class has a fixed random
/// binary prototype image (Bernoulli 0/1 per pixel, keyed by seed and class),
/// and every sample is the prototype plus Gaussian noise (sigma = 0.1)
/// clipped to [0, 1]. Prototypes of distinct classes differ in about half of
/// their 3072 pixels, so classes are separated by a wide margin relative to
/// the noise. Samples interleave classes so any prefix stays nearly balanced.
inline Dataset make_synthetic(int64_t n_per_class, int classes, uint64_t seed,
                              const std::string& split = "train") {
  if (n_per_class < 1)
    throw std::invalid_argument("make_synthetic: n_per_class must be >= 1");
  if (classes < 2 || classes > kNumClasses)
    throw std::invalid_argument("make_synthetic: classes must be in [2, 10]");
  Prng root(seed);
  std::vector<std::vector<float>> protos(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    Prng pr = root.split(stream::kSynthetic, static_cast<uint64_t>(c));
    protos[static_cast<size_t>(c)].resize(static_cast<size_t>(kImagePixels));
    for (float& v : protos[static_cast<size_t>(c)])
      v = pr.bernoulli(0.5f) ? 1.0f : 0.0f;
  }
  const uint64_t split_key = split == "train" ? 0u : 1u;
  const int64_t n = n_per_class * classes;
  std::vector<float> images(static_cast<size_t>(n * kImagePixels));
  std::vector<int> labels(static_cast<size_t>(n));
  int64_t row = 0;
  for (int64_t i = 0; i < n_per_class; ++i) {
    for (int c = 0; c < classes; ++c, ++row) {
      Prng sr = root.split(stream::kSynthetic + 10 + split_key,
                           static_cast<uint64_t>(c), static_cast<uint64_t>(i));
      const std::vector<float>& p = protos[static_cast<size_t>(c)];
      float* dst = images.data() + row * kImagePixels;
      for (int64_t t = 0; t < kImagePixels; ++t)
        dst[t] = std::clamp(p[static_cast<size_t>(t)] + sr.normal(0.0f, 0.1f),
                            0.0f, 1.0f);
      labels[static_cast<size_t>(row)] = c;
    }
  }
  Dataset ds;
  ds.split = split;
  ds.images = Tensor({n, kImageH, kImageW, kImageC}, std::move(images));
  ds.labels = std::move(labels);
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  float h_shift_frac = 0.10f;
  float v_shift_frac = 0.10f;
  float zoom_frac = 0.20f;
  bool hflip = true;
  float rot_deg = 5.0f;
  bool enabled = true;
};

namespace detail {

inline void hflip_image(const float* src, float* dst) {
  for (int64_t y = 0; y < kImageH; ++y)
    for (int64_t x = 0; x < kImageW; ++x)
      for (int64_t c = 0; c < kImageC; ++c)
        dst[(y * kImageW + x) * kImageC + c] =
            src[(y * kImageW + (kImageW - 1 - x)) * kImageC + c];
}

inline float bilinear_sample(const float* img, float sy, float sx, int64_t c) {
  const int64_t x0 = static_cast<int64_t>(std::floor(sx));
  const int64_t y0 = static_cast<int64_t>(std::floor(sy));
  const float wx = sx - static_cast<float>(x0);
  const float wy = sy - static_cast<float>(y0);
  auto tap = [&](int64_t y, int64_t x) -> float {
    if (y < 0 || y >= kImageH || x < 0 || x >= kImageW) return 0.0f;  // fill
    return img[(y * kImageW + x) * kImageC + c];
  };
  const float top = (1.0f - wx) * tap(y0, x0) + wx * tap(y0, x0 + 1);
  const float bot = (1.0f - wx) * tap(y0 + 1, x0) + wx * tap(y0 + 1, x0 + 1);
  return (1.0f - wy) * top + wy * bot;
}

}  // namespace detail

/// Applies, in order: horizontal flip (p = 0.5), rotation U(-rot, +rot)
/// degrees, zoom U(1-z, 1+z), then sub-pixel shifts U(-f*32, +f*32) per axis.
/// Sampling is bilinear with zero fill outside the image. Five random draws
/// are consumed per call in a fixed order, so a sample's transform depends
/// only on the generator handed in.
inline std::vector<float> augment(std::span<const float> img,
                                  const AugmentConfig& cfg, Prng& rng) {
  const bool flip = rng.uniform() < 0.5f && cfg.hflip;
  const float theta = rng.uniform(-cfg.rot_deg, cfg.rot_deg) *
                      0.017453292519943295f;  // degrees to radians
  const float zoom = rng.uniform(1.0f - cfg.zoom_frac, 1.0f + cfg.zoom_frac);
  const float dx = rng.uniform(-cfg.h_shift_frac, cfg.h_shift_frac) *
                   static_cast<float>(kImageW);
  const float dy = rng.uniform(-cfg.v_shift_frac, cfg.v_shift_frac) *
                   static_cast<float>(kImageH);

  std::vector<float> src(img.begin(), img.end());
  if (flip) {
    std::vector<float> flipped(src.size());
    detail::hflip_image(src.data(), flipped.data());
    src = std::move(flipped);
  }

  std::vector<float> out(static_cast<size_t>(kImagePixels));
  const float cx = static_cast<float>(kImageW - 1) / 2.0f;
  const float cy = static_cast<float>(kImageH - 1) / 2.0f;
  const float cos_t = std::cos(theta);
  const float sin_t = std::sin(theta);
  const float inv_zoom = 1.0f / zoom;
  for (int64_t y = 0; y < kImageH; ++y) {
    for (int64_t x = 0; x < kImageW; ++x) {
      // Invert shift, then zoom about the center, then rotation.
      const float ux = static_cast<float>(x) - dx - cx;
      const float uy = static_cast<float>(y) - dy - cy;
      const float zx = ux * inv_zoom;
      const float zy = uy * inv_zoom;
      const float sx = cos_t * zx + sin_t * zy + cx;
      const float sy = -sin_t * zx + cos_t * zy + cy;
      for (int64_t c = 0; c < kImageC; ++c)
        out[(y * kImageW + x) * kImageC + c] =
            detail::bilinear_sample(src.data(), sy, sx, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline Tensor one_hot(std::span<const int> labels, int classes = kNumClasses) {
  std::vector<float> out(labels.size() * static_cast<size_t>(classes), 0.0f);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw DataError("one_hot: label out of range");
    out[i * static_cast<size_t>(classes) + static_cast<size_t>(labels[i])] = 1.0f;
  }
  return Tensor({static_cast<int64_t>(labels.size()), classes}, std::move(out));
}

struct Batch {
  Tensor x;  // [b, 32, 32, 3]
  Tensor y;  // [b, 10] one-hot
  std::vector<int> labels;
  std::vector<int64_t> indices;  // dataset rows this batch was drawn from
};

/// Index partition for one epoch: shuffled by the (seed, epoch) substream,
/// final partial batch kept.
inline std::vector<std::vector<int64_t>> batch_indices(int64_t n,
                                                       int64_t batch_size,
                                                       bool shuffle,
                                                       uint64_t seed,
                                                       int64_t epoch) {
  if (batch_size < 1)
    throw std::invalid_argument("batch_size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Prng rng = Prng(seed).split(stream::kShuffle, static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[rng.uniform_index(static_cast<uint64_t>(i + 1))]);
  }
  std::vector<std::vector<int64_t>> out;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

/// Assembles one batch; when `aug` is given each sample is transformed with
/// its own substream keyed (seed, epoch, dataset index).
inline Batch gather_batch(const Dataset& ds, std::span<const int64_t> idx,
                          const AugmentConfig* aug, uint64_t seed,
                          int64_t epoch) {
  Batch b;
  const int64_t n = static_cast<int64_t>(idx.size());
  std::vector<float> x(static_cast<size_t>(n * kImagePixels));
  b.labels.resize(static_cast<size_t>(n));
  Prng root(seed);
  for (int64_t i = 0; i < n; ++i) {
    auto img = ds.image(idx[static_cast<size_t>(i)]);
    if (aug && aug->enabled) {
      Prng sr = root.split(stream::kAugment, static_cast<uint64_t>(epoch),
                           static_cast<uint64_t>(idx[static_cast<size_t>(i)]));
      std::vector<float> a = augment(img, *aug, sr);
      std::copy(a.begin(), a.end(), x.begin() + i * kImagePixels);
    } else {
      std::copy(img.begin(), img.end(), x.begin() + i * kImagePixels);
    }
    b.labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
  }
  b.x = Tensor({n, kImageH, kImageW, kImageC}, std::move(x));
  b.y = one_hot(b.labels);
  b.indices.assign(idx.begin(), idx.end());
  return b;
}

/// Full epoch of (x, one-hot y) batches.
inline std::vector<Batch> batches(const Dataset& ds, int64_t batch_size,
                                  uint64_t seed, int64_t epoch, bool shuffle,
                                  const AugmentConfig* aug = nullptr) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(ds.size(), batch_size, shuffle, seed, epoch))
    out.push_back(gather_batch(ds, idx, aug, seed, epoch));
  return out;
}

}  // namespace lowbit
