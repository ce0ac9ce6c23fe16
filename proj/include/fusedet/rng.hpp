#pragma once

#include <cstdint>

#include "fusedet/tensor.hpp"

namespace fusedet {

/// SplitMix64 stream. Every random quantity in the library is derived from it so
/// results depend only on the integer seed.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw per call, no caching).
  double normal();

  Tensor normal_tensor(Shape shape, double stddev = 1.0);

 private:
  std::uint64_t state_;
};

/// Seed for an independent sub-stream, e.g. per scene or per component.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace fusedet
