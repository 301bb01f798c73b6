#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace crepair {

// Counter-based generator: the draw at position k is a pure function of
// (seed, stream, k), so sample streams replay identically no matter how the
// surrounding code is reordered. The mix is splitmix64 applied to a
// Weyl-sequenced counter.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ mix(stream ^ 0x9e3779b97f4a7c15ull))), counter_(0) {}

  std::uint64_t next_u64() {
    std::uint64_t x = key_ + 0x9e3779b97f4a7c15ull * ++counter_;
    return mix(x);
  }

  // Uniform double in [0, 1), 53-bit resolution.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (cosine branch, one value per pair of
  // uniforms, so the stream position stays a simple function of draw count).
  double next_gaussian() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t next_below(std::uint64_t bound) {
    // Rejection sampling keeps the result unbiased and platform-stable.
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % bound;
  }

  // Independent stream derived from this generator's key.
  Rng split(std::uint64_t stream) const { return Rng(key_, stream + 1); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

// Deterministic Fisher-Yates; std::shuffle is not reproducible across
// standard library implementations.
template <typename Container>
void shuffle(Container& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace crepair
