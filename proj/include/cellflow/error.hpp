#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cellflow {

enum class ErrorCode {
  // tensorio
  BadMagic,
  BadVersion,
  BadDType,
  BadRank,
  TruncatedPayload,
  TrailingBytes,
  DimOverflow,
  MalformedLine,
  UnknownClass,
  InvalidRecord,
  Io,
  // shared shape/value checks
  ShapeMismatch,
  EmptyInput,
  InvalidArgument,
  // wsi
  DegenerateGeometry,
  DegenerateScale,
  // tokens
  CountMismatch,
  // clsmod
  DimMismatch,
  EmptySplit,
  SingleClassVal,
  NoComputableClass,
  EmptySearchSpace,
  FractionOutOfRange,
  // metrics
  EmptySuite,
  NegativeEnergy,
  // datagen
  DegenerateFOV,
  MissingEmbedding,
  MissingLabel,
  SlideInBothSplits,
  UnassignedSlide,
  // service
  NotFound,
  JobAlreadyRunning,
  InvalidConfig,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Single exception type for the library; `code()` identifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }
  /// Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace cellflow
