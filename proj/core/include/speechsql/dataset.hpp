#pragma once

// Instances, JSON-lines manifests, the ASR noise injector and the synthetic
// corpus generator.

#include "speechsql/features.hpp"
#include "speechsql/schema.hpp"
#include "speechsql/semql.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace speechsql {

struct ManifestRecord {
  std::string id;
  std::string db_id;
  std::string audio;  // file path (.sqlf or .wav) or "pseudo:<tokens>"
  std::optional<std::vector<std::string>> transcript;
  std::string sql;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Instance {
  std::string id;
  SpeechFeatures features;
  std::string db_id;
  std::optional<std::vector<std::string>> transcript;
  std::string gold_sql;
  ActionSequence gold_actions;
  std::vector<std::string> candidate_values;
};

struct BuildOptions {
  int n_distractors = 8;
  std::uint64_t seed = 0;
  PseudoTTSConfig tts;
  /// Directory that relative audio paths are resolved against.
  std::filesystem::path base_dir;
};

inline constexpr std::string_view kPseudoPrefix = "pseudo:";

/// Loads or synthesizes the features named by `audio`.
SpeechFeatures load_audio(const std::string& audio, const BuildOptions& opts);

/// Parses the gold SQL, draws distractor literals, and derives gold actions.
Instance build_instance(const ManifestRecord& record, const Schema& schema, const Grammar& grammar,
                        const BuildOptions& opts = {});

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> parse_manifest(std::string_view jsonl);
std::string manifest_to_jsonl(const std::vector<ManifestRecord>& records);

/// Builds every record; throws with the record id prefixed on failure.
/// base_dir defaults to the manifest's directory when empty.
std::vector<Instance> load_dataset(const std::filesystem::path& manifest, const SchemaStore& store,
                                   const Grammar& grammar, BuildOptions opts = {});
std::vector<Instance> build_instances(const std::vector<ManifestRecord>& records, const SchemaStore& store,
                                      const Grammar& grammar, const BuildOptions& opts = {});

struct NoiseSpec {
  double target_wer = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> vocabulary;
  double tolerance = 0.02;
};

/// Applies exactly k word edits where k/len is the reachable rate closest to
/// target_wer. Throws EmptyTranscript.
std::vector<std::string> inject_asr_noise(const std::vector<std::string>& transcript, const NoiseSpec& spec);

// ---- synthetic corpus ---------------------------------------------------

struct SynthOptions {
  std::uint64_t seed = 0;
  /// Questions longer than this many words are rejected and redrawn.
  int max_words = 20;
};

/// Distinct (question, db_id) records with "pseudo:" audio and transcripts.
std::vector<ManifestRecord> synth_records(const SchemaStore& store, int n, const SynthOptions& opts = {});

struct SynthSplit {
  std::vector<ManifestRecord> train;
  std::vector<ManifestRecord> test;
};

/// Train and held-out sets with no shared (question, db_id) pair, where every
/// held-out word also occurs in training.
SynthSplit synth_split(const SchemaStore& store, int n_train, int n_test, const SynthOptions& opts = {});

/// Sorted distinct words over all transcripts.
std::vector<std::string> transcript_vocabulary(const std::vector<ManifestRecord>& records);

}  // namespace speechsql
