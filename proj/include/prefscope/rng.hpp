#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "prefscope/hash.hpp"

namespace prefscope {

// Deterministic RNG wrapper. All draws go through explicit algorithms (no
// std::*_distribution, whose output is implementation-defined), so streams
// are reproducible across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t u64() { return engine_(); }

  // Uniform in [0, n), rejection-sampled to remove modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    uint64_t x, r;
    do {
      x = engine_();
      r = x % n;
    } while (x - r > uint64_t(0) - n);
    return r;
  }

  // Uniform double in [0, 1) with 53 random bits.
  double real() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * real(); }

  bool bernoulli(double p) { return real() < p; }

  bool coin() { return (engine_() & 1ull) != 0; }

  // Box-Muller; one spare value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = real();
    } while (u1 <= 1e-300);
    u2 = real();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in selection order.
  std::vector<size_t> sample_indices(size_t n, size_t k) {
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k && i < n; ++i) {
      size_t j = i + static_cast<size_t>(below(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  // Independent child stream for a tagged sub-task.
  Rng derive(uint64_t tag) const {
    return Rng(splitmix64(base_seed_mix() ^ splitmix64(tag + 0x1234567u)));
  }

 private:
  uint64_t base_seed_mix() const {
    // Mix the engine's current position indirectly via a copy draw.
    std::mt19937_64 copy = engine_;
    return copy();
  }

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace prefscope
