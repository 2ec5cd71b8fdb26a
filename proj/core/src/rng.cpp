#include "knowla/rng.hpp"

#include <cmath>

namespace knowla {

float Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Rejection-free Box-Muller on open-interval uniforms.
  double u1;
  do {
    u1 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  } while (u1 <= 0.0);
  const double u2 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 6.283185307179586 * u2;
  spare_ = static_cast<float>(r * std::sin(a));
  has_spare_ = true;
  return static_cast<float>(r * std::cos(a));
}

std::vector<float> Rng::normal_vec(size_t n, float mean, float stddev) {
  std::vector<float> out(n);
  for (auto& v : out) v = normal(mean, stddev);
  return out;
}

uint64_t derive_seed(uint64_t base, std::string_view tag) {
  // FNV-1a over the tag, mixed with the base seed.
  uint64_t h = 14695981039346656037ull;
  for (char c : tag) {
    h ^= static_cast<uint8_t>(c);
    h *= 1099511628211ull;
  }
  h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace knowla
