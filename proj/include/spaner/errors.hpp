#ifndef SPANER_ERRORS_HPP
#define SPANER_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spaner {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or width disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad configuration: unknown or duplicate tags, invalid hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid call argument, e.g. k larger than the gallery.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Dataset content problems (too few instances per class, empty sets).
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Two checkpoints that do not share a parameter lineage.
class LineageError : public Error {
 public:
  using Error::Error;
};

}  // namespace spaner

#endif  // SPANER_ERRORS_HPP
