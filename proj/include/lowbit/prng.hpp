#pragma once

#include <cmath>
#include <cstdint>

namespace lowbit {

/// Splittable deterministic random generator (splitmix64 core).
///
/// A `Prng` carries an immutable root seed plus an advancing draw state.
/// `split(a, b, c)` derives an independent substream keyed by up to three
/// integers from the root seed only, so substreams do not depend on how many
/// values were drawn from the parent. This is what makes per-sample
/// augmentation and per-epoch shuffling reproducible regardless of
/// evaluation order.
class Prng {
 public:
  explicit Prng(uint64_t seed) : seed_(seed), state_(seed) {}

  /// Independent substream keyed by (a, b, c), derived from the root seed.
  Prng split(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    uint64_t s = seed_;
    s = mix(s ^ mix(a + 0x1));
    s = mix(s ^ mix(b + 0x2));
    s = mix(s ^ mix(c + 0x3));
    return Prng(s);
  }

  uint64_t next_u64() { return mix(state_ += 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0, 1) with 24-bit resolution.
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n), n > 0.
  uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

  bool bernoulli(float p) { return uniform() < p; }

  /// Standard normal via Box-Muller; second value of each pair is cached.
  float normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    // u1 in (0, 1] so the log is finite.
    float u1 = static_cast<float>((next_u64() >> 40) + 1) * (1.0f / 16777216.0f);
    float u2 = uniform();
    float r = std::sqrt(-2.0f * std::log(u1));
    float t = 6.2831853071795864f * u2;
    cached_ = r * std::sin(t);
    has_cached_ = true;
    return r * std::cos(t);
  }

  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  uint64_t root_seed() const { return seed_; }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t state_;
  float cached_ = 0.0f;
  bool has_cached_ = false;
};

/// Substream purposes. Keeping these in one place documents which keys a
/// reproducible run consumes.
namespace stream {
constexpr uint64_t kWeightInit = 1;  // split(kWeightInit, layer_index)
constexpr uint64_t kShuffle = 2;     // split(kShuffle, epoch)
constexpr uint64_t kAugment = 3;     // split(kAugment, epoch, sample_index)
constexpr uint64_t kDropout = 4;     // split(kDropout, epoch, batch_index)
constexpr uint64_t kSynthetic = 5;   // split(kSynthetic, class, sample_index)
constexpr uint64_t kEval = 6;
}  // namespace stream

}  // namespace lowbit
