#pragma once

// The assembled speech-to-SQL network: speech encoder, schema encoder,
// cosine linking, co-attention fusion and the grammar decoder.

#include "speechsql/dataset.hpp"
#include "speechsql/decoder.hpp"
#include "speechsql/fusion.hpp"
#include "speechsql/schema_encoder.hpp"
#include "speechsql/speech_encoder.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace speechsql {

struct ModelConfig {
  SpeechEncoderConfig speech;
  SchemaEncoderConfig schema;
  FusionConfig fusion;
  DecoderConfig decoder;
  /// Features are padded or resampled to this many frames.
  int input_frames = 80;
  bool no_linking = false;
  bool no_fusion = false;

  /// Published sizes (d_model 512).
  static ModelConfig paper();
  /// Reduced sizes for CPU runs.
  static ModelConfig desk(int d_model = 128);

  int d_model() const { return fusion.d_model; }
  /// Throws InvalidArgument if component widths disagree.
  void validate() const;
};

/// JSON object text.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

/// Words of every schema node, value pool entry, candidate value and
/// transcript, added in a deterministic order.
Vocabulary build_vocabulary(const SchemaStore& schemas, const std::vector<Instance>& instances);

/// Per-instance decoder inputs, valid for the Context they were built in.
struct EncodedInstance {
  DecoderInputs inputs;
  ag::Var za_raw;  // speech embedding before linking and fusion
  ag::Var zs_raw;  // schema embedding before fusion
  ag::Var link;    // cosine link scores (undefined with no_linking)
};

struct EncodeTrace {
  std::vector<FusionTrace> fusion;
};

class Model {
 public:
  Model(ModelConfig cfg, Grammar grammar, Vocabulary vocab, SchemaStore schemas, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const Grammar& grammar() const { return grammar_; }
  const Vocabulary& vocab() const { return vocab_; }
  const SchemaStore& schemas() const { return schemas_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  const Schema& schema(const std::string& db_id) const;
  const SchemaCatalog& catalog(const std::string& db_id) const;
  const SchemaGraph& graph(const std::string& db_id) const;

  /// Encodes a batch jointly (the speech encoder normalizes over it).
  std::vector<EncodedInstance> encode(ag::Context& ctx, const std::vector<const Instance*>& batch,
                                      EncodeTrace* trace = nullptr);

  /// Sum of per-instance teacher-forced losses. Throws GoldActionMasked
  /// with the instance id.
  ag::Var batch_loss(ag::Context& ctx, const std::vector<const Instance*>& batch);

  /// Greedy decode in inference mode. Throws MaxStepsExceeded.
  ActionSequence predict_actions(const Instance& inst);
  /// Greedy decode rendered as SQL; empty when decoding fails.
  std::string predict_sql(const Instance& inst);

  /// Binary tensors with a JSON header holding config, vocabulary, grammar
  /// and the JSON object `extra_json` under "extra".
  void save(const std::filesystem::path& path, const std::string& extra_json = "{}") const;
  /// Returns the stored "extra" object text. Throws CheckpointMismatch on
  /// any disagreement with this model.
  std::string load_weights(const std::filesystem::path& path);

 private:
  struct SchemaCache {
    SchemaCatalog catalog;
    SchemaGraph graph;
  };

  ModelConfig cfg_;
  Grammar grammar_;
  Vocabulary vocab_;
  SchemaStore schemas_;
  ParamStore store_;
  std::map<std::string, std::unique_ptr<SchemaCache>> cache_;
};

/// Reads a checkpoint header and reconstructs the model it describes.
std::unique_ptr<Model> load_model(const std::filesystem::path& path, const SchemaStore& schemas,
                                  std::string* extra_json = nullptr);

std::string grammar_text(const Grammar& grammar);

}  // namespace speechsql
