#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lvlmlens::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kCompute = 3 };

/// Runs one invocation; `args` excludes the program name. Machine output goes to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lvlmlens::cli
