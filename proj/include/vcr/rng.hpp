#pragma once

#include <cstdint>
#include <string_view>

namespace vcr {

// Counter-based 64-bit generator.
//
// Output i of a stream with key k is mix64(k + (i + 1) * 0x9E3779B97F4A7C15), i.e. the
// SplitMix64 sequence started at state k. Every output is a pure function of (key, i), so
// streams can be split and replayed without shared state. Child streams are keyed by
// split(k, s) = mix64(k ^ mix64(s + 0xD1B54A32D192ED03)).
class CounterRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}

  static constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t split(std::uint64_t key, std::uint64_t stream) noexcept {
    return mix64(key ^ mix64(stream + 0xD1B54A32D192ED03ULL));
  }

  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

  constexpr std::uint64_t next() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
  }

  // Unbiased draw in [0, bound) by rejection of the low partial bucket.
  constexpr std::uint64_t bounded(std::uint64_t bound) noexcept {
    if (bound <= 1) return 0;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t x = next();
      if (x >= threshold) return x % bound;
    }
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; consumes exactly two outputs per call.
  double normal() noexcept;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// 64-bit FNV-1a over raw bytes.
constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Per-image key: scheduling-independent, derived only from the id and the run seed.
constexpr std::uint64_t image_seed(std::string_view image_id, std::uint64_t global_seed) noexcept {
  return fnv1a64(image_id) ^ global_seed;
}

}  // namespace vcr
