#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dfsar::cli {

enum ExitCode : int {
  kSuccess = 0,
  kValidationFailure = 1,
  kMissingAsset = 2,
  kNumericalFailure = 3,
};

/// Parses and executes one command: prepare, train, train-siamese, translate
/// or assess. Errors are reported on `err` and mapped to an exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dfsar::cli
