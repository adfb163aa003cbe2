#pragma once
// Deterministic pseudo-randomness for the whole pipeline.
//
// Every random quantity in the project is derived from one top-level seed
// through named streams (derive_stream), and parallel kernels draw by sample
// index (the *_at functions) so a value never depends on thread scheduling.
// The generator is SplitMix64: tiny, fast, and its output for a given
// (seed, index) is identical on every platform, which the std::<random>
// distributions do not guarantee.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace qs {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

// SplitMix64 finalizer: bijective avalanche mix of one 64-bit word.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// i-th output of the SplitMix64 stream seeded with `seed` (random access).
inline constexpr std::uint64_t rand_at(std::uint64_t seed, std::uint64_t i) {
  return mix64(seed + (i + 1) * kGolden);
}

// Named sub-stream derivation.  Calls with distinct id tuples give
// statistically independent streams; the mapping is pure and documented so
// any artifact can be regenerated from the top-level seed alone.
inline constexpr std::uint64_t derive_stream(std::uint64_t seed) { return seed; }

template <class... Ids>
inline constexpr std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t id,
                                             Ids... rest) {
  return derive_stream(mix64(seed ^ (id + kGolden)), static_cast<std::uint64_t>(rest)...);
}

// Uniform in [0, 1) from 53 high bits.
inline constexpr double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Uniform in (0, 1]; safe as a log() argument.
inline constexpr double to_unit_pos(std::uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

// Box-Muller pair N(0,1)^2 from sample counters 2i and 2i+1.  Random access:
// parallel kernels index by i and get the same pair regardless of schedule.
inline std::pair<double, double> normal_pair_at(std::uint64_t seed, std::uint64_t i) {
  const double u1 = to_unit_pos(rand_at(seed, 2 * i));
  const double u2 = to_unit(rand_at(seed, 2 * i + 1));
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(t), r * std::sin(t)};
}

// Sequential generator.  Rng(seed).next() enumerates the same stream as
// rand_at(seed, 0), rand_at(seed, 1), ...
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += kGolden;
    return mix64(state_);
  }

  double uniform() { return to_unit(next()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // N(0,1); burns two raw draws per call (the Box-Muller partner is dropped
  // to keep the state advance independent of call history).
  double normal() {
    const double u1 = to_unit_pos(next());
    const double u2 = to_unit(next());
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mu, double sd) { return mu + sd * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n); n > 0.  Multiply-shift, no rejection loop.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace qs
