#include "speechsql/error.hpp"

namespace speechsql {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInputTooShort: return "InputTooShort";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kMalformedSchema: return "MalformedSchema";
    case ErrorCode::kDuplicateDbId: return "DuplicateDbId";
    case ErrorCode::kUnsupportedSql: return "UnsupportedSQL";
    case ErrorCode::kUnknownColumn: return "UnknownColumn";
    case ErrorCode::kUnknownTable: return "UnknownTable";
    case ErrorCode::kEmptyTranscript: return "EmptyTranscript";
    case ErrorCode::kUnknownSymbol: return "UnknownSymbol";
    case ErrorCode::kEmptyGrammar: return "EmptyGrammar";
    case ErrorCode::kIncompleteDerivation: return "IncompleteDerivation";
    case ErrorCode::kIllegalAction: return "IllegalAction";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kEmptyNodeName: return "EmptyNodeName";
    case ErrorCode::kEmptyEmbedding: return "EmptyEmbedding";
    case ErrorCode::kCompleteDerivation: return "CompleteDerivation";
    case ErrorCode::kMaxStepsExceeded: return "MaxStepsExceeded";
    case ErrorCode::kBatchTooSmall: return "BatchTooSmall";
    case ErrorCode::kEmptyExamples: return "EmptyExamples";
    case ErrorCode::kMissingTranscripts: return "MissingTranscripts";
    case ErrorCode::kGoldActionMasked: return "GoldActionMasked";
    case ErrorCode::kUnknownComponent: return "UnknownComponent";
    case ErrorCode::kEmptyReference: return "EmptyReference";
    case ErrorCode::kCheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Error";
}

}  // namespace speechsql
