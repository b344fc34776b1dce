#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ncchi::cli {

enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kDataError = 2,
    kNotConverged = 3,
};

/// Runs one subcommand. args[0] is the program name. Diagnostics go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& err);

}  // namespace ncchi::cli
