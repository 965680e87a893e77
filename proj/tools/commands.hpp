#pragma once

#include <string>
#include <vector>

namespace musc::cli {

// Runs the command line and returns the process exit code:
// 0 success, 1 usage or configuration error, 2 runtime error.
int run(const std::vector<std::string>& args);

}  // namespace musc::cli
