#pragma once

#include <stdexcept>
#include <string>

namespace privisp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Image carries the wrong colour-domain tag for the requested operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented invariant (range, finiteness, shape).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Argument lies outside a supported range (e.g. colour temperature).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Evaluation protocol cannot run on the given inputs.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. `location()` names the byte offset or field path.
class ParseError : public Error {
 public:
  ParseError(std::string location, const std::string& what)
      : Error(location + ": " + what), location_(std::move(location)) {}
  const std::string& location() const noexcept { return location_; }

 private:
  std::string location_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Warmup never reached the requested proxy accuracy.
class WarmupError : public Error {
 public:
  WarmupError(const std::string& what, double best_accuracy)
      : Error(what), best_accuracy_(best_accuracy) {}
  double best_accuracy() const noexcept { return best_accuracy_; }

 private:
  double best_accuracy_;
};

/// Another process holds the output directory.
class LockError : public Error {
 public:
  using Error::Error;
};

}  // namespace privisp
