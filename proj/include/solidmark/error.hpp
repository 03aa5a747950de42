#pragma once

#include <stdexcept>
#include <string>

namespace solidmark {

// Root of every error the library throws. Subtypes name the failure class so
// callers (and the CLI) can react without parsing messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ModelError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Thrown by load_dataset when the manifest declares keys but keymap.json is
// missing. Never silently regenerated.
class KeymapAbsentError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

// Zero mean neighbour distance in the rescaled l2 metric.
class DegenerateInputError : public DomainError {
 public:
  using DomainError::DomainError;
};

class EmbedderError : public DomainError {
 public:
  using DomainError::DomainError;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace solidmark
