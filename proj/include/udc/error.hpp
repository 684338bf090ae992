#pragma once

#include <stdexcept>
#include <string>

namespace udc {

/// Bad input data: unreadable files, malformed records, inconsistent labels.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary or text format violations (checkpoints, label stores, score files).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up with the model configuration.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arguments outside an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace udc
