#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cods {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape / rank mismatches between tensors or feature maps.
struct DimError : Error {
  using Error::Error;
};

// NaN/Inf encountered in a forward or backward pass.
struct NumericError : Error {
  using Error::Error;
};

// Batch statistics requested over a single element.
struct DegenerateStatsError : Error {
  using Error::Error;
};

// Invalid or out-of-grid configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Contrastive pair construction impossible (batch too small, no pairs).
struct PairingError : Error {
  using Error::Error;
};

// AP undefined (no ground truth in the evaluation set).
struct EvalError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable combination of a base seed and a stream/role id.
inline uint64_t mix_seed(uint64_t base, uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x9e3779b97f4a7c15ULL));
}

// PCG32 with Box-Muller normals. Bit-stable across platforms for the
// integer path; normals depend only on libm determinism per machine.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 1) : seed_(seed) {
    inc_ = (stream << 1u) | 1u;
    state_ = 0;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // [0,1)
  double next_double() { return next_u32() * (1.0 / 4294967296.0); }
  float next_float() { return static_cast<float>(next_double()); }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(next_double());
  }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    if (hi <= lo) return lo;
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>((static_cast<uint64_t>(next_u32()) * span) >> 32u);
  }

  float normal(float mu = 0.f, float sigma = 1.f) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    // u1 in (0,1], u2 in [0,1)
    double u1 = (static_cast<double>(next_u32()) + 1.0) / 4294967296.0;
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    has_spare_ = true;
    return mu + sigma * static_cast<float>(r * std::cos(a));
  }

  // Derive an independent substream; stable in the original seed, not in
  // the current consumption state.
  Rng child(uint64_t stream_id) const {
    return Rng(mix_seed(seed_, stream_id), splitmix64(stream_id) | 1u);
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t state_ = 0;
  uint64_t inc_ = 1;
  float spare_ = 0.f;
  bool has_spare_ = false;
};

inline float normalize_angle(float a) {
  // wrap into (-pi, pi]
  a = std::fmod(a, 2.0f * static_cast<float>(M_PI));
  if (a <= -static_cast<float>(M_PI)) a += 2.0f * static_cast<float>(M_PI);
  if (a > static_cast<float>(M_PI)) a -= 2.0f * static_cast<float>(M_PI);
  return a;
}

}  // namespace cods
