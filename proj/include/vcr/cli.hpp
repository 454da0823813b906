#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vcr {

// Entry point of the `vcr` tool. `args` excludes the program name. Returns 0 on success, 1 when
// an operation fails, 2 on usage errors.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vcr
