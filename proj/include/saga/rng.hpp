#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace saga {

// mt19937_64 output is fixed by the standard; the distributions below are
// written out by hand because std:: distributions differ across standard
// libraries and would break bitwise reproducibility.
using Rng = std::mt19937_64;

inline std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for a named sub-stream: splitmix64(root ^ fnv1a(label)).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) noexcept {
  return splitmix64(root ^ fnv1a(label));
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [lo, hi] (inclusive) by rejection sampling.
inline long uniform_int(Rng& rng, long lo, long hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return lo + static_cast<long>(rng());
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return lo + static_cast<long>(v % span);
}

/// Standard normal via Box-Muller.
double standard_normal(Rng& rng);

}  // namespace saga
