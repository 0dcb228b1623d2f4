#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace palm {

/// splitmix64 finalizer; used to derive independent stream seeds from a base seed
/// and a tuple of integer keys (step, example index, ...).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix_seed(base);
  for (std::uint64_t k : keys) {
    h = mix_seed(h ^ mix_seed(k));
  }
  return h;
}

/// Thin wrapper over mt19937_64. The distributions are written out by hand so that
/// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi).
  std::uint64_t below(std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t span = hi - lo;
    // rejection sampling to remove modulo bias
    const std::uint64_t limit = span == 0 ? 0 : (~std::uint64_t{0} - span + 1) % span;
    std::uint64_t r = engine_();
    while (r < limit) {
      r = engine_();
    }
    return lo + (span == 0 ? 0 : r % span);
  }

  /// Standard normal via Box-Muller (one value per call, the pair partner is discarded).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace palm
