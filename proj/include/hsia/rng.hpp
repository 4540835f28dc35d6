#pragma once

#include <cmath>
#include <cstdint>

namespace hsia {

// PCG32 with splitmix64 seeding. Bit-stable across platforms; all
// initialization and data generation in the project goes through this so
// runs are reproducible from a single 64-bit seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    state_ = 0u;
    inc_ = (splitmix(stream + 0x9e3779b97f4a7c15ull) << 1u) | 1u;
    next_u32();
    state_ += splitmix(seed);
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // Uniform in [0,1) with 24 bits of mantissa.
  double next_uniform01() { return (next_u32() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform01(); }

  // Box-Muller; consumes two draws per pair, caches the second.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_uniform01();
    double u2 = next_uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // Normal(0, std) truncated to +/- 2 std by rejection.
  double trunc_normal(double std_dev) {
    double v = normal();
    while (v < -2.0 || v > 2.0) v = normal();
    return v * std_dev;
  }

  std::uint64_t next_u64() {
    std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform integer in [0, n).
  std::uint32_t below(std::uint32_t n) {
    if (n <= 1) return 0;
    std::uint64_t m = static_cast<std::uint64_t>(next_u32()) * n;
    return static_cast<std::uint32_t>(m >> 32);
  }

  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 1;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace hsia
