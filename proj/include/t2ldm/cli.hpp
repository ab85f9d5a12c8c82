#pragma once

#include <string>
#include <vector>

namespace t2ldm::cli {

/// Exit statuses: 0 success, 1 validation error or bad flags, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

int parse_and_dispatch(int argc, const char* const* argv);

/// Same as parse_and_dispatch; args exclude the program name.
int run(const std::vector<std::string>& args);

}  // namespace t2ldm::cli
