#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace speechsql {

/// Every failure the library reports carries one of these codes so callers
/// (tests, the CLI exit-code mapping) can branch without parsing messages.
enum class ErrorCode {
  kInputTooShort,
  kEmptyInput,
  kMalformedSchema,
  kDuplicateDbId,
  kUnsupportedSql,
  kUnknownColumn,
  kUnknownTable,
  kEmptyTranscript,
  kUnknownSymbol,
  kEmptyGrammar,
  kIncompleteDerivation,
  kIllegalAction,
  kShapeMismatch,
  kEmptyNodeName,
  kEmptyEmbedding,
  kCompleteDerivation,
  kMaxStepsExceeded,
  kBatchTooSmall,
  kEmptyExamples,
  kMissingTranscripts,
  kGoldActionMasked,
  kUnknownComponent,
  kEmptyReference,
  kCheckpointMismatch,
  kIo,
  kInvalidArgument,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace speechsql
