#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace uformer::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Parses and runs one `uformer` command. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uformer::cli
