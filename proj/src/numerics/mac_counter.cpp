#include "quala/numerics/mac_counter.hpp"

namespace quala::numerics {

namespace {
thread_local std::uint64_t g_macs = 0;
}

std::uint64_t mac_count() { return g_macs; }
void add_macs(std::uint64_t macs) { g_macs += macs; }
void reset_mac_count() { g_macs = 0; }

}  // namespace quala::numerics
