#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace invarc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of the operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// State outside the domain of a right-hand side (e.g. r = 0 in a 1/r^2 term).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// State left the admissible cone by more than the configured tolerance.
class ViabilityError : public Error {
 public:
  using Error::Error;
};

/// Jacobian too ill-conditioned to invert.
class ConditioningError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during integration or training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step = -1, int stage = -1)
      : Error(what), step_(step), stage_(stage) {}

  long step() const { return step_; }
  int stage() const { return stage_; }

 private:
  long step_;
  int stage_;
};

struct Diagnostic {
  int line = 0;
  int column = 0;
  std::string message;

  std::string str() const {
    return std::to_string(line) + ":" + std::to_string(column) + ": " + message;
  }
};

/// One or more problems found while parsing, checking or lowering a spec.
class SpecError : public Error {
 public:
  explicit SpecError(std::vector<Diagnostic> diags)
      : Error(join(diags)), diagnostics_(std::move(diags)) {}

  const std::vector<Diagnostic>& diagnostics() const { return diagnostics_; }

 private:
  static std::string join(const std::vector<Diagnostic>& diags) {
    std::string out;
    for (const auto& d : diags) {
      if (!out.empty()) out += "\n";
      out += d.str();
    }
    return out;
  }

  std::vector<Diagnostic> diagnostics_;
};

}  // namespace invarc
