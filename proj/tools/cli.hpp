#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sketch3d::cli {

// Process exit codes.
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIntegrity = 3, kNumerical = 4 };

// Runs one command line (without the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sketch3d::cli
