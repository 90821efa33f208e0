#pragma once

#include <stdexcept>
#include <string>

namespace bcmda {

// Error taxonomy. Everything thrown by the library derives from Error so
// callers (the CLI in particular) can report failures uniformly.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/extents disagree with what an operation requires.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

// An API contract was violated (wrong call order, non-scalar loss, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

// A numeric/config parameter is out of its documented range.
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& msg) : Error("parameter error: " + msg) {}
};

// A serialized artifact (tensor file, checkpoint, manifest, config) is malformed.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

// Filesystem-level failure (missing file, short read, unwritable path).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("i/o error: " + msg) {}
};

// The synthetic-data generator could not satisfy its own constraints.
class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& msg) : Error("generation error: " + msg) {}
};

}  // namespace bcmda
