#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace doprompt::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kNumerical = 3, kIo = 4 };

/// Runs the `doprompt` command line. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace doprompt::cli
