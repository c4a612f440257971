#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace p23d {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs the `p23d` tool on args (without the program name). Results go to
/// out; diagnostics go to err, errors as `error:<module>:<kind>: message`.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

int cli_main(int argc, char **argv);

} // namespace p23d
