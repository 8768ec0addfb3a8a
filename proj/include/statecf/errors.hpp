#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace statecf {

// Bad configuration or schema. line is 0 when not tied to a file line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, std::size_t line = 0, std::string field = {})
      : std::runtime_error(message), line_(line), field_(std::move(field)) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The requested world cannot be built from the vocabulary sizes.
class VocabError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A training loss went non-finite; term() names the offending component.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& message, std::string term)
      : std::runtime_error(message), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace statecf
