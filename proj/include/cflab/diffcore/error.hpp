#ifndef CFLAB_DIFFCORE_ERROR_HPP
#define CFLAB_DIFFCORE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace cflab {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf was produced. `where` names the primitive or step.
class NumericalError : public Error {
 public:
  NumericalError(std::string where, const std::string& what)
      : Error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Requested file or checkpoint is absent or unreadable.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

}  // namespace cflab

#endif  // CFLAB_DIFFCORE_ERROR_HPP
