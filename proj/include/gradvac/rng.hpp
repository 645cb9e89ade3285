#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

namespace gradvac {

// All randomness in the project flows through mt19937_64. Its output
// sequence is fixed by the standard, so a seeded run reproduces
// bit-for-bit on any conforming implementation. Distribution adaptors
// from <random> are NOT standardized the same way, which is why the
// helpers below are hand-rolled.
using Rng = std::mt19937_64;

inline constexpr std::string_view kRngAlgorithm = "mt19937_64";

// SplitMix64 finalizer, used to spread seeds and derive substreams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a over bytes. Stable across platforms; used for substream labels
// and config hashing.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Child generator for a named substream. Streams with distinct labels are
// independent of the order in which the caller visits them.
inline Rng substream(std::uint64_t base, std::string_view label) {
  return Rng(mix64(base ^ fnv1a64(label)));
}

// Uniform double in [0, 1) with 53 random bits.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Unbiased uniform integer in [0, bound), bound >= 1, by rejection.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t bound) {
  const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t rem = (max % bound + 1) % bound;
  for (;;) {
    const std::uint64_t x = rng();
    if (rem == 0 || x < max - rem + 1) return x % bound;
  }
}

// In-place Fisher-Yates. std::shuffle leaves the draw pattern up to the
// implementation, so it cannot be used where byte-stable runs matter.
template <typename T>
void fisher_yates(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

// Standard normal deviate via Box-Muller (the second member of each pair
// is discarded to keep the stream position independent of call pairing).
inline double gaussian(Rng& rng) {
  double u1 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace gradvac
