#include "quala/numerics/rng.hpp"

#include <cmath>
#include <numbers>

namespace quala::numerics {

namespace {

// splitmix64 finalizer
std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), key_(mix(mix(seed) ^ mix(~stream))) {}

std::uint64_t Rng::next_u64() {
  const std::uint64_t c = counter_++;
  return mix(key_ ^ mix(c * 0xd1342543de82ef95ULL + 1));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::uniform_int(std::size_t lo, std::size_t hi) {
  if (hi <= lo) return lo;
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = span == 0 ? 0 : (~std::uint64_t{0} - span + 1) % span;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= limit) return lo + static_cast<std::size_t>(r % span);
  }
}

double Rng::normal() {
  // Box-Muller; the second variate is discarded so every draw costs a fixed
  // two counter steps.
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Rng Rng::split(std::uint64_t stream) const {
  Rng child(seed_);
  child.key_ = mix(key_ ^ mix(stream * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  return child;
}

}  // namespace quala::numerics
