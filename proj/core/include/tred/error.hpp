#pragma once

#include <stdexcept>
#include <string>

namespace tred {

/// Input violates a documented precondition (bad shape, non-finite entries, bad range).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Two operands that must share a shape do not.
class ShapeMismatch : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

/// A numerical routine failed (SVD non-convergence after retry, etc.).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// A required artifact (disentangler, checkpoint, dataset) is absent or unreadable.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tred
