#pragma once

#include <iosfwd>

namespace mecca {

/// Entry point behind the `mecca` binary. Returns the process exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error. Failures print
/// one JSON line {"error": kind, "message": text} to `err`.
int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace mecca
