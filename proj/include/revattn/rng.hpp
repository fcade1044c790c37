#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>

namespace revattn {

// Seeded generator whose derived draws do not depend on the standard
// library's distribution implementations, so outputs are reproducible
// across toolchains for a given seed.
// Independent seed for a named sub-stream (splitmix64 of seed and stream
// id), so consumers sharing a user seed do not draw correlated sequences.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.
  double normal();

  // Uniform integer in [0, n); n must be positive.
  std::size_t index(std::size_t n);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = index(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace revattn
