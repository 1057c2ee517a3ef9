#include "saga/error.hpp"

namespace saga {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::AllZeroGrid: return "AllZeroGrid";
    case ErrorCode::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorCode::TokenNotValid: return "TokenNotValid";
    case ErrorCode::EmptyTokenSet: return "EmptyTokenSet";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::MalformedTrace: return "MalformedTrace";
    case ErrorCode::StageOutOfRange: return "StageOutOfRange";
    case ErrorCode::AreaTooSmall: return "AreaTooSmall";
    case ErrorCode::BudgetTooSmall: return "BudgetTooSmall";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::EncoderUnavailable: return "EncoderUnavailable";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonDifferentiableMember: return "NonDifferentiableMember";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::DegenerateRegion: return "DegenerateRegion";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::UnparseableReply: return "UnparseableReply";
    case ErrorCode::OutOfRangeScore: return "OutOfRangeScore";
    case ErrorCode::TransientFailure: return "TransientFailure";
    case ErrorCode::EmptyScores: return "EmptyScores";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::MissingImage: return "MissingImage";
    case ErrorCode::BadPixelRange: return "BadPixelRange";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::MissingArtifacts: return "MissingArtifacts";
    case ErrorCode::MalformedRecords: return "MalformedRecords";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace saga
