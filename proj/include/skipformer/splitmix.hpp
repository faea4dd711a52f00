#pragma once

#include <cstdint>

namespace skipformer {

// SplitMix64 (Steele, Lea, Flood). Every seeded stream in the project comes
// from here so weights and masks are reproducible in any language.
class SplitMix64 {
 public:
  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  constexpr double next_unit() noexcept {
    return static_cast<double>(next() >> 11) / 9007199254740992.0;  // 2^53
  }

 private:
  std::uint64_t state_;
};

}  // namespace skipformer
