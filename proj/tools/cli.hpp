#pragma once

#include <string>
#include <vector>

namespace abltx::cli {

// Exit codes: 0 success, 2 input/contract error, 3 IO error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitContract = 2;
inline constexpr int kExitIo = 3;

int run(int argc, const char *const *argv);
int run(const std::vector<std::string> &args); // args[0] is the program name

} // namespace abltx::cli
