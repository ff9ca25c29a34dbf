#ifndef JOINTAD_RNG_HPP
#define JOINTAD_RNG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

namespace jointad {

// Deterministic random source. std::mt19937_64 is fully specified by the
// standard; the value mappings below are pinned here so that seeded results
// are identical across standard libraries (the std::*_distribution classes
// make no such guarantee).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift mapping; bias is O(n / 2^64).
  std::uint64_t uniform_below(std::uint64_t n) {
    using u128 = unsigned __int128;
    return static_cast<std::uint64_t>((static_cast<u128>(eng_()) * n) >> 64);
  }

  // Uniform integer in [lo, hi] inclusive.
  int range(int lo, int hi) {
    return lo + static_cast<int>(uniform_below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, no caching: one value per call, two engine draws.
  double normal() {
    double u1 = uniform(), u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (decltype(n) i = n - 1; i > 0; --i) {
      auto j = static_cast<decltype(n)>(uniform_below(static_cast<std::uint64_t>(i + 1)));
      std::swap(first[i], first[j]);
    }
  }

  // Independent child stream; never advances this stream.
  Rng fork(std::uint64_t stream) const {
    return Rng(mix(seed_of(eng_), stream));
  }

 private:
  static std::uint64_t seed_of(const std::mt19937_64& e) {
    // Engines are cheap to hash via their next output on a copy.
    std::mt19937_64 c = e;
    return c();
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  std::mt19937_64 eng_;
};

// Per-item seed rule used by parallel data generation: results must not
// depend on worker count, so every item derives its own stream.
inline std::uint64_t item_seed(std::uint64_t base_seed, std::uint64_t item_index) {
  return base_seed + item_index;
}

}  // namespace jointad

#endif  // JOINTAD_RNG_HPP
