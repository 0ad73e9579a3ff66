#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sourcenet {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SOURCENET_ERROR(Name)        \
  class Name : public Error {        \
   public:                           \
    using Error::Error;              \
  }

// mtmath
SOURCENET_ERROR(ZeroTensor);
SOURCENET_ERROR(DegenerateTensor);

// forward
SOURCENET_ERROR(NoRay);
SOURCENET_ERROR(NoStations);
SOURCENET_ERROR(InvariantError);

// psdr
SOURCENET_ERROR(NoiseTooShort);
SOURCENET_ERROR(TooFewStations);

// features / containers
SOURCENET_ERROR(TooShort);
SOURCENET_ERROR(FormatError);
SOURCENET_ERROR(AlreadyNormalized);
SOURCENET_ERROR(IoError);

// nn
SOURCENET_ERROR(ShapeError);
SOURCENET_ERROR(AllMasked);
SOURCENET_ERROR(NoTape);

// train / eval
SOURCENET_ERROR(EmptySplit);
SOURCENET_ERROR(NonFiniteLoss);
SOURCENET_ERROR(ConfigMismatch);
SOURCENET_ERROR(ConfigError);
SOURCENET_ERROR(IndexError);
SOURCENET_ERROR(SimulationFailed);

#undef SOURCENET_ERROR

/// Text parse failure; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Binary container ended early; carries the byte offset where reading failed.
class TruncatedFile : public Error {
 public:
  TruncatedFile(std::uint64_t offset, const std::string& what)
      : Error("truncated at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace sourcenet
