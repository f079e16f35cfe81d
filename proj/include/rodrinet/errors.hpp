#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace rodrinet {

/// Broad failure classes; the CLI maps them onto process exit codes.
enum class ErrorCategory {
  usage,       // exit 1
  validation,  // exit 2: bad documents, shapes, formats, configs
  numerical,   // exit 3: divergence, non-convergence, tolerance violations
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define RODRINET_DEFINE_ERROR(Name, Category)                      \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what)                         \
        : Error(ErrorCategory::Category, #Name ": " + what) {}     \
  };

RODRINET_DEFINE_ERROR(InvalidAxis, validation)
RODRINET_DEFINE_ERROR(InvalidQuaternion, validation)
RODRINET_DEFINE_ERROR(InvalidParameter, validation)
RODRINET_DEFINE_ERROR(InvalidTopology, validation)
RODRINET_DEFINE_ERROR(SchemaError, validation)
RODRINET_DEFINE_ERROR(ShapeError, validation)
RODRINET_DEFINE_ERROR(InvalidShape, validation)
RODRINET_DEFINE_ERROR(InvalidLoss, validation)
RODRINET_DEFINE_ERROR(ConfigError, validation)
RODRINET_DEFINE_ERROR(IoError, validation)
RODRINET_DEFINE_ERROR(UsageError, usage)
RODRINET_DEFINE_ERROR(RejectionBudgetExceeded, numerical)
RODRINET_DEFINE_ERROR(NonFiniteValue, numerical)

#undef RODRINET_DEFINE_ERROR

/// Malformed container file; `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorCategory::validation,
              "FormatError at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IKDidNotConverge : public Error {
 public:
  IKDidNotConverge(double residual, int iterations)
      : Error(ErrorCategory::numerical,
              "IKDidNotConverge: residual " + std::to_string(residual) +
                  " after " + std::to_string(iterations) + " iterations"),
        residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class DivergedError : public Error {
 public:
  explicit DivergedError(std::size_t step)
      : Error(ErrorCategory::numerical,
              "DivergedError: non-finite loss at step " + std::to_string(step)),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace rodrinet
