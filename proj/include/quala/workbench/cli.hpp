#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace quala::workbench {

inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 1;
inline constexpr int exit_runtime = 2;

/// Runs the command line `args` (without the program name). Results go to
/// `out`, usage problems and runtime failures to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace quala::workbench
