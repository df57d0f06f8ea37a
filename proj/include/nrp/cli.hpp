#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nrp::cli {

/// Runs one `nrp` command. `args` excludes the program name. Returns the
/// process exit code: 0 on success, 1 on runtime failure, 2 on usage errors.
///
/// Options may also come from `--config FILE` (key=value lines, keys are long
/// option names without dashes); flags given on the command line win.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nrp::cli
