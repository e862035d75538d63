#pragma once

#include <stdexcept>
#include <string>

namespace trigger_scope {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Matrix/vector dimensions do not line up.
class ShapeError : public Error {
public:
  using Error::Error;
};

// A scalar argument is outside its valid domain (bad label index, h <= 0, ...).
class DomainError : public Error {
public:
  using Error::Error;
};

// Invalid model or experiment configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Dataset contents violate a contract (label out of range, missing ground truth).
class DataError : public Error {
public:
  using Error::Error;
};

// An operation was asked to do something structurally forbidden
// (e.g. edit a special token).
class PolicyError : public Error {
public:
  using Error::Error;
};

// A poison spec cannot be satisfied (empty trigger list, too few eligible rows).
class SpecError : public Error {
public:
  using Error::Error;
};

// Empty or unusable input where content is required.
class InputError : public Error {
public:
  using Error::Error;
};

// A referenced file is missing or unreadable/unwritable.
class PathError : public Error {
public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
  using Error::Error;
};

}  // namespace trigger_scope
