#pragma once

#include <cstdint>

namespace quala::numerics {

// Per-thread multiply-accumulate instrumentation. Every forward matmul (float
// or integer) adds m·k·n; backward passes do not count.
std::uint64_t mac_count();
void add_macs(std::uint64_t macs);
void reset_mac_count();

/// Measures the MACs registered on this thread during its lifetime.
class MacScope {
 public:
  MacScope() : start_(mac_count()) {}
  std::uint64_t elapsed() const { return mac_count() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace quala::numerics
