#pragma once

// Query-match scoring, word error rate and timed evaluation.

#include "speechsql/dataset.hpp"
#include "speechsql/schema.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace speechsql {

struct MatchParts {
  bool select_columns = false;
  bool aggregators = false;
  bool conditions = false;
  bool structure = false;
};

struct MatchReport {
  bool exact = false;
  MatchParts parts;
};

/// Never throws: a query that fails to parse scores all-false.
MatchReport query_match(std::string_view pred_sql, std::string_view gold_sql, const Schema& schema);

struct WERReport {
  double wer = 0.0;
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int reference_length = 0;
};

/// Unit-cost alignment; ties in the backtrace prefer substitution, then
/// deletion. Throws EmptyReference.
WERReport wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

/// Whitespace tokenization, lowercased.
std::vector<std::string> split_words(std::string_view text);

struct EvalDetail {
  std::string id;
  std::string pred_sql;
  std::string gold_sql;
  MatchReport match;
  double seconds = 0.0;
};

struct EvalReport {
  int n = 0;
  double query_acc = 0.0;
  double select_acc = 0.0;
  double aggregator_acc = 0.0;
  double condition_acc = 0.0;
  double structure_acc = 0.0;
  double tpq_seconds = 0.0;  // mean wall-clock seconds per prediction
  std::vector<EvalDetail> details;
};

using SqlPredictor = std::function<std::string(const Instance&)>;

/// Times and scores every prediction. Writes eval_report.json and
/// eval_details.csv into out_dir when it is non-empty.
EvalReport evaluate(const std::vector<Instance>& instances, const SchemaStore& schemas, const SqlPredictor& predict,
                    const std::filesystem::path& out_dir = {});

class Model;

/// Greedy decoding with `model`.
EvalReport evaluate(Model& model, const std::vector<Instance>& instances, const std::filesystem::path& out_dir = {});

/// Loads a checkpoint and evaluates it on the manifest's instances. Throws
/// CheckpointMismatch when the file is not a compatible model or the
/// manifest names a database the checkpoint cannot encode.
EvalReport evaluate_checkpoint(const std::filesystem::path& ckpt, const std::vector<ManifestRecord>& records,
                               const SchemaStore& schemas, const BuildOptions& opts,
                               const std::filesystem::path& out_dir = {});

std::string eval_report_json(const EvalReport& report);

/// Replaces each transcript with a noised copy at `target_wer` and
/// re-synthesizes its pseudo-speech. Returns the mean achieved WER.
double degrade_transcripts(std::vector<Instance>& instances, double target_wer, std::uint64_t seed,
                           const PseudoTTSConfig& tts = {});

}  // namespace speechsql
