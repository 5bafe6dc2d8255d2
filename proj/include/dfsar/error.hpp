#pragma once

#include <stdexcept>
#include <string>

namespace dfsar {

/// Base of every error the library raises. The CLI maps kinds to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input, violated precondition, shape mismatch. Exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A required file or checkpoint is absent or unreadable. Exit code 2.
class MissingAssetError : public Error {
 public:
  MissingAssetError(std::string asset, const std::string& detail)
      : Error("missing " + asset + ": " + detail), asset_(std::move(asset)) {}
  const std::string& asset() const noexcept { return asset_; }

 private:
  std::string asset_;
};

/// Non-finite loss or similar numerical breakdown. Exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

#define DFSAR_REQUIRE(cond, msg)                 \
  do {                                           \
    if (!(cond)) throw ::dfsar::ValidationError(msg); \
  } while (false)

}  // namespace dfsar
