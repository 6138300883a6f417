#ifndef VMARGIN_ERROR_HPP
#define VMARGIN_ERROR_HPP

#include <stdexcept>
#include <string>

namespace vmargin {

/// Process exit codes shared by every CLI command.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kNumerical = 3,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
  virtual ExitCode code() const noexcept = 0;
};

/// Caller violated a precondition (bad shape, bad flag, index out of range).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
  ExitCode code() const noexcept override { return ExitCode::kUsage; }
};

/// Input data is malformed or inconsistent (non-finite logit, misaligned audits).
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
  ExitCode code() const noexcept override { return ExitCode::kData; }
};

/// A computation could not produce a meaningful number.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& msg) : Error(msg) {}
  ExitCode code() const noexcept override { return ExitCode::kNumerical; }
};

}  // namespace vmargin

#endif  // VMARGIN_ERROR_HPP
