#pragma once

#include <iosfwd>

namespace cdg {

// Exit codes: 0 success, 2 usage or config error, 1 runtime error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `cdg` tool, callable in-process.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace cdg
