#include "cellflow/error.hpp"

namespace cellflow {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadVersion: return "BadVersion";
    case ErrorCode::BadDType: return "BadDType";
    case ErrorCode::BadRank: return "BadRank";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::TrailingBytes: return "TrailingBytes";
    case ErrorCode::DimOverflow: return "DimOverflow";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::InvalidRecord: return "InvalidRecord";
    case ErrorCode::Io: return "Io";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::DegenerateScale: return "DegenerateScale";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::SingleClassVal: return "SingleClassVal";
    case ErrorCode::NoComputableClass: return "NoComputableClass";
    case ErrorCode::EmptySearchSpace: return "EmptySearchSpace";
    case ErrorCode::FractionOutOfRange: return "FractionOutOfRange";
    case ErrorCode::EmptySuite: return "EmptySuite";
    case ErrorCode::NegativeEnergy: return "NegativeEnergy";
    case ErrorCode::DegenerateFOV: return "DegenerateFOV";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::MissingLabel: return "MissingLabel";
    case ErrorCode::SlideInBothSplits: return "SlideInBothSplits";
    case ErrorCode::UnassignedSlide: return "UnassignedSlide";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::JobAlreadyRunning: return "JobAlreadyRunning";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace cellflow
