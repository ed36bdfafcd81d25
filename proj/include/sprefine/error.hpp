#ifndef SPREFINE_ERROR_HPP
#define SPREFINE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace sprefine {

/// Caller passed something that violates an operation's precondition.
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

/// A computation produced a non-finite or otherwise unusable number.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// File or stream could not be read, written or decoded.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// A refinement job failed as a whole (for example every seed diverged).
class JobError : public std::runtime_error {
 public:
  explicit JobError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sprefine

#endif
