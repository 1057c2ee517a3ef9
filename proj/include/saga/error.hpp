#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace saga {

enum class ErrorCode {
  AllZeroGrid,
  LayerOutOfRange,
  TokenNotValid,
  EmptyTokenSet,
  GridMismatch,
  MalformedTrace,
  StageOutOfRange,
  AreaTooSmall,
  BudgetTooSmall,
  InvalidArgument,
  EncoderUnavailable,
  ShapeMismatch,
  NonDifferentiableMember,
  UnknownKind,
  DegenerateRegion,
  DegenerateVariance,
  UnparseableReply,
  OutOfRangeScore,
  TransientFailure,
  EmptyScores,
  MalformedRecord,
  MissingImage,
  BadPixelRange,
  DuplicateId,
  MissingArtifacts,
  MalformedRecords,
  InvalidConfig,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Library-wide exception. Every failure mode named by a module contract maps
/// to one ErrorCode so callers can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace saga
