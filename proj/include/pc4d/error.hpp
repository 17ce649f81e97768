#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pc4d {

enum class ErrorKind {
  kParse,
  kTopologyMismatch,
  kEmptyAnimation,
  kTooFewFrames,
  kInsufficientFrames,
  kDegenerateBounds,
  kAllZeroAreas,
  kPoissonUnderfill,
  kIo,
  kBadMagic,
  kChecksumMismatch,
  kVersionUnsupported,
  kSchema,
  kTooFewPoints,
  kShapeMismatch,
  kNonFinite,
  kCacheMismatch,
  kContextOverflow,
  kUnknownToken,
  kNonFiniteLoss,
  kEmptyDataset,
  kEmbedderUnavailable,
  kEmptyInput,
  kTransport,
  kParseFailure,
  kValidationFailure,
  kSkippedSample,
  kDimensionMismatch,
  kInvalidArgument,
};

std::string_view to_string(ErrorKind kind);

// All library failures are reported through this type; `kind()` is stable and
// machine-readable, `what()` carries the human detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& detail) { throw Error(kind, detail); }

}  // namespace pc4d
