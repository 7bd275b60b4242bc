#pragma once

#include <stdexcept>
#include <string>

namespace rali {

enum class ErrorKind {
  Dim,
  DegenerateInput,
  Numeric,
  Format,
  Validation,
  Io,
  Param,
  Rank,
  Alloc,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dim: return "DimError";
    case ErrorKind::DegenerateInput: return "DegenerateInput";
    case ErrorKind::Numeric: return "NumericError";
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::Validation: return "ValidationError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Param: return "ParamError";
    case ErrorKind::Rank: return "RankError";
    case ErrorKind::Alloc: return "AllocError";
  }
  return "Error";
}

/// Single exception type for the engine; `kind()` carries the category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit code for an error category: 2 validation, 3 numeric, 4 I/O.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateInput:
    case ErrorKind::Numeric:
      return 3;
    case ErrorKind::Io:
      return 4;
    default:
      return 2;
  }
}

}  // namespace rali
