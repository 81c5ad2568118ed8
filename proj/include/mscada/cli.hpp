#pragma once

#include <iosfwd>

namespace mscada {

// Subcommands: gen-data, train, eval, gradcheck, sweep. Returns the process
// exit code: 0 success, 1 runtime or config error, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mscada
