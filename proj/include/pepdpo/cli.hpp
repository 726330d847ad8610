#pragma once

// Command-line driver. Subcommands: gen, train, eval, sweep, entropy.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
// 1 anything else.

#include <iosfwd>

namespace pepdpo::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pepdpo::cli
