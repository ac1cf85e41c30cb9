#pragma once

#include <cmath>
#include <cstdint>

namespace dplab {

/// Deterministic splittable PRNG (SplitMix64 stream).
///
/// The stream is a pure function of the seed, so runs are reproducible
/// across processes and (64-bit) platforms. split() derives a child
/// generator whose stream is decorrelated from the parent's; parallel
/// workers each own one child and never share state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed ^ kSeedTag)) {}

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via the Box-Muller transform. Uses both branches of
  /// each transform, caching the second sample.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] keeps log(u1) finite.
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * kPi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double gaussian(double mean, double std) { return mean + std * gaussian(); }

  /// Independent child stream. Advances this generator by one draw.
  Rng split() {
    Rng child(0);
    child.state_ = mix(next_u64() ^ kSplitTag);
    return child;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr std::uint64_t kSeedTag = 0x5DEECE66Dull;
  static constexpr std::uint64_t kSplitTag = 0xDA3E39CB94B95BDBull;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dplab
