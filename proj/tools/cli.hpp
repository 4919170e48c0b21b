#pragma once

#include <string>
#include <vector>

namespace gsq::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;    ///< bad arguments or config
inline constexpr int kFailure = 2;  ///< runtime failure

/// Runs the gsq command line; args[0] is the program name.
int run(const std::vector<std::string>& args);

}  // namespace gsq::cli
