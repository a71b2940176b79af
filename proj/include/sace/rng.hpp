#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sace::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// replicate r of a run seeded with `master` gets its own reproducible stream
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 1));
}

// Explicit distributions on top of mt19937_64, so streams do not depend on
// the standard library's unspecified std::*_distribution algorithms.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) : gen_(seed) {}

  double uniform01() {  // in [0, 1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  int bernoulli(double p) { return uniform01() < p ? 1 : 0; }

  long uniform_below(long n) {
    return static_cast<long>(gen_() % static_cast<std::uint64_t>(n));
  }

  double normal() {  // Marsaglia polar method, spare cached
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sace::rng
