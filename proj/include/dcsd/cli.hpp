#pragma once

#include <iosfwd>

namespace dcsd {

// Entry point of the `dcsd` tool. Commands: synth, train, eval, profile,
// export-kernels, experiment, config. Returns the process exit code; failures print a
// {"error": kind, "message": ...} object to err.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dcsd
