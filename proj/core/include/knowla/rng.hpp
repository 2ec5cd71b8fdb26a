// Deterministic RNG. All stochastic components draw through this wrapper so
// runs are reproducible bit-for-bit from one global seed.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace knowla {

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  bool coin() { return (next_u64() & 1u) != 0; }

  // Box-Muller, so the stream does not depend on the stdlib's distribution.
  float normal();
  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  std::vector<float> normal_vec(size_t n, float mean, float stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  float spare_ = 0.f;
};

// Stable per-component seed fan-out: same (seed, tag) always maps to the
// same stream, distinct tags to unrelated ones.
uint64_t derive_seed(uint64_t base, std::string_view tag);

}  // namespace knowla
