#pragma once

#include <stdexcept>
#include <string>

namespace calign {

// Shape or dimension mismatch between operands; message names the op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed, or an optimisation that diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of an API contract (bad arguments, wrong tape, double backward).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Faithfulness is undefined when clean and empty-circuit metrics coincide.
class DegenerateTaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file the command depends on is absent or does not match expectations.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace calign
