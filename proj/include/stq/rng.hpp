// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace stq {

// Deterministic PRNG (splitmix64). Training reproducibility is a contract of
// this library, so randomness must not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return static_cast<float>(next_double()); }

  // Uniform integer in [0, n), n > 0.
  uint64_t below(uint64_t n) {
    // Multiply-shift; bias is negligible for the ranges used here (< 2^32),
    // and the mapping is fixed, which is what reproducibility needs.
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Independent child stream; `tag` separates streams derived from one seed.
  Rng fork(uint64_t tag) {
    Rng child(state_ ^ (0xA5A5A5A5DEADBEEFull + tag * 0x9E3779B97F4A7C15ull));
    child.next_u64();
    return child;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
void shuffle(T* data, size_t n, Rng& rng) {
  if (n < 2) return;
  for (size_t i = n - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(rng.below(i + 1));
    T tmp = data[i];
    data[i] = data[j];
    data[j] = tmp;
  }
}

}  // namespace stq
