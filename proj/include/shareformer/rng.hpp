// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic randomness. All streams derive from one user seed via
// labeled hashing, so adding a new consumer never shifts existing streams.
// Dropout uses counter-based (stateless) access keyed by (seed, step, site),
// which makes masks reproducible regardless of evaluation interleaving.

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace shareformer {

// splitmix64 finalizer; full-avalanche mix of a 64-bit word.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derive an independent sub-seed for a named consumer.
inline constexpr std::uint64_t sub_seed(std::uint64_t seed, std::string_view label) {
  return mix64(seed, fnv1a(label));
}

// Uniform double in [0, 1) from 53 random bits.
inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Stateless access: i-th uniform of the stream identified by `key`.
inline double uniform_at(std::uint64_t key, std::uint64_t i) {
  return u64_to_unit(mix64(key, i));
}

// Sequential stream (splitmix64). Box-Muller for gaussians; no spare cached,
// so the draw sequence is a pure function of the number of calls.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  double uniform() { return u64_to_unit(next_u64()); }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [lo, hi] inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace shareformer
