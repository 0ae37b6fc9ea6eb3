#pragma once

#include <cstddef>
#include <cstdint>

namespace quala::numerics {

/// Counter-based generator: draw i of stream s under seed k is a pure function
/// of (k, s, i), so split streams are reproducible regardless of call order in
/// other streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [lo, hi], inclusive.
  std::size_t uniform_int(std::size_t lo, std::size_t hi);
  double normal();
  bool bernoulli(double p);

  /// Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace quala::numerics
