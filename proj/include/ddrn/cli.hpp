#ifndef DDRN_CLI_HPP_
#define DDRN_CLI_HPP_

#include <iosfwd>
#include <string>
#include <vector>

#include "ddrn/gradcheck_suite.hpp"

namespace ddrn {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point for `ddrn <command> [flags]`; args excludes the program name.
/// Reports go to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// The gradcheck command body over an explicit case list.
int run_gradcheck(const std::vector<GradCheckCase>& cases, std::ostream& out, std::ostream& err);

}  // namespace ddrn

#endif  // DDRN_CLI_HPP_
