#pragma once

#include <cstdint>
#include <vector>

namespace oshx {

/// Deterministic random generator: xoshiro256++ seeded through splitmix64.
/// The algorithm is fixed so that a given seed produces the same draw
/// sequence on every platform and build. std::mt19937 would pin the raw
/// bit stream but not the distribution transforms, so both the generator
/// and every transform below are spelled out here.
class Rng {
public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed);

  uint64_t next_u64();

  /// Uniform in [0, 1): 53-bit mantissa draw.
  double uniform();

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller (two uniforms per pair, cached).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  /// Fisher-Yates shuffle, deterministic for a given state.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derives an independent stream from this seed and a stream id, without
  /// disturbing the current state. Used for per-epoch / per-sample streams.
  static uint64_t mix(uint64_t seed, uint64_t stream);

private:
  uint64_t state_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

} // namespace oshx
