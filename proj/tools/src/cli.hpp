#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sfd::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kInvalidConfig = 2, kDiverged = 3 };

/// Runs one command (`args` excludes the program name). Artifacts and a
/// manifest.json go to the --out directory.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sfd::cli
