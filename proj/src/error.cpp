#include "pc4d/error.hpp"

namespace pc4d {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "ParseError";
    case ErrorKind::kTopologyMismatch: return "TopologyMismatch";
    case ErrorKind::kEmptyAnimation: return "EmptyAnimation";
    case ErrorKind::kTooFewFrames: return "TooFewFrames";
    case ErrorKind::kInsufficientFrames: return "InsufficientFrames";
    case ErrorKind::kDegenerateBounds: return "DegenerateBounds";
    case ErrorKind::kAllZeroAreas: return "AllZeroAreas";
    case ErrorKind::kPoissonUnderfill: return "PoissonUnderfill";
    case ErrorKind::kIo: return "IoError";
    case ErrorKind::kBadMagic: return "BadMagic";
    case ErrorKind::kChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::kVersionUnsupported: return "VersionUnsupported";
    case ErrorKind::kSchema: return "SchemaError";
    case ErrorKind::kTooFewPoints: return "TooFewPoints";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kNonFinite: return "NonFinite";
    case ErrorKind::kCacheMismatch: return "CacheMismatch";
    case ErrorKind::kContextOverflow: return "ContextOverflow";
    case ErrorKind::kUnknownToken: return "UnknownToken";
    case ErrorKind::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::kEmptyDataset: return "EmptyDataset";
    case ErrorKind::kEmbedderUnavailable: return "EmbedderUnavailable";
    case ErrorKind::kEmptyInput: return "EmptyInput";
    case ErrorKind::kTransport: return "Transport";
    case ErrorKind::kParseFailure: return "ParseFailure";
    case ErrorKind::kValidationFailure: return "ValidationFailure";
    case ErrorKind::kSkippedSample: return "SkippedSample";
    case ErrorKind::kDimensionMismatch: return "DimensionMismatch";
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace pc4d
