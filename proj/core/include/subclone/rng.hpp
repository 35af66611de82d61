#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace subclone {

// Seeded RNG with hand-rolled sampling on top of std::mt19937_64.
// The raw engine sequence is pinned by the standard and the transforms
// below avoid std::*_distribution, whose output is implementation-defined,
// so streams are reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  int64_t uniform_int(int64_t n) {
    // Rejection sampling keeps the draw unbiased for any n.
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // 1 - u1 keeps the log argument strictly positive.
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double theta = 6.283185307179586 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace subclone
