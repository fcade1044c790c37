#pragma once

#include <stdexcept>
#include <string>

namespace revattn {

// Process exit codes used by the CLI. Every Error maps onto one of them.
enum class ExitCode : int {
  kSuccess = 0,
  kValidation = 2,
  kNumerical = 3,
  kData = 4,
};

enum class ErrorKind {
  kInvalidToken,
  kSequenceTooLong,
  kShapeMismatch,
  kTraceMismatch,
  kEmptyInput,
  kInvalidConfig,
  kTemplateError,
  kNumericalError,
  kLengthMismatch,
  kInsufficientData,
  kFixtureCorrupt,
  kIoError,
  kTokenizeError,
};

const char* to_string(ErrorKind kind);
ExitCode exit_code_for(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  ExitCode exit_code() const noexcept { return exit_code_for(kind_); }

 private:
  ErrorKind kind_;
};

}  // namespace revattn
