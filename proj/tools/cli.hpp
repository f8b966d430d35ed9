#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace maunet::cli {

enum ExitCode : int { ok = 0, gradcheck_failed = 1, config_error = 2, numeric_abort = 3 };

/// Parses `args` (without the program name) and runs the chosen command.
/// Library errors are reported on `err` and mapped onto the exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace maunet::cli
