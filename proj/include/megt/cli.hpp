#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace megt {

/// Exit codes shared by every command.
enum ExitCode : int { exit_ok = 0, exit_check_failed = 1, exit_usage = 2, exit_numeric = 3 };

/// Runs one `megt` command line (args excludes the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace megt
