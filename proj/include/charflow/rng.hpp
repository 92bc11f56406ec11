#pragma once

#include <cstdint>

namespace charflow {

/// SplitMix64 step; used for seeding and for deriving sub-stream seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Seed for an independent sub-stream, e.g. per particle.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// xoshiro256** generator.
///
/// Stream contract (reproducible in any language):
///   - state = four successive splitmix64 outputs starting from `seed`;
///   - uniform() = (next() >> 11) * 2^-53, in [0, 1);
///   - normal() consumes two uniforms u1, u2 and returns
///     sqrt(-2 ln(1 - u1)) * cos(2 pi u2). No value is cached.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t s_[4];
};

}  // namespace charflow
