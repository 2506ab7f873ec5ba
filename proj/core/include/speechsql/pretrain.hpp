#pragma once

// Speech-sentence pre-training (speech and text autoencoders plus an
// in-batch contrastive term) and speech-item presence pre-training.

#include "speechsql/dataset.hpp"
#include "speechsql/model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace speechsql {

/// Parameters of the auxiliary heads: "sae." (mirrored transposed-conv
/// decoder), "tae." (LSTM token decoder), "sipt." (presence classifier).
void init_pretrain_heads(ParamStore& store, const ModelConfig& cfg, int vocab_size, int sipt_bins,
                         std::mt19937_64& rng);

struct PairBatch {
  std::vector<const ag::Matrix*> speech;      // (input_frames, 96) each
  std::vector<std::vector<int>> transcripts;  // non-empty token ids
  std::vector<int> valid_frames;              // unpadded encoder rows; empty = all
  int size() const { return static_cast<int>(speech.size()); }
};

struct SSPTLoss {
  ag::Var total;
  ag::Var la;
  ag::Var ls;
  ag::Var lp;
};

/// Mean over rows of KL(softmax(target_row) || softmax(logits_row)).
ag::Var kl_rows(const ag::Matrix& target, const ag::Var& logits);

/// Mean over b of log sum_{i != b} exp(cos(ha_b, hs_i)) - cos(ha_b, hs_b).
/// Throws BatchTooSmall when fewer than two rows.
ag::Var contrastive_loss(const ag::Var& ha, const ag::Var& hs);

/// Throws BatchTooSmall.
SSPTLoss sspt_loss(ag::Context& ctx, ParamStore& store, const ModelConfig& cfg, const PairBatch& batch);

struct SIPTExample {
  const SpeechFeatures* features = nullptr;  // borrowed from the instance
  std::string column;                        // merged column name
  std::vector<std::string> item_tokens;
  int label = 0;
};

/// Gold columns as positives, then up to n_negatives unused columns drawn
/// with `seed`.
std::vector<SIPTExample> sipt_examples(const Instance& instance, const Schema& schema, int n_negatives = 3,
                                       std::uint64_t seed = 0);

/// Rows average frames [floor(k L / bins), ceil((k+1) L / bins)) into bin k.
ag::Matrix adaptive_pool_matrix(int frames, int bins);

/// Mean binary cross-entropy of sigmoid(w_f . cosvec + b_f), probabilities
/// clamped to [1e-7, 1 - 1e-7]. Throws EmptyExamples.
ag::Var sipt_loss(ag::Context& ctx, ParamStore& store, const ModelConfig& cfg, const Vocabulary& vocab,
                  const std::vector<SIPTExample>& examples, std::vector<double>* probs = nullptr);

struct PretrainConfig {
  ModelConfig model = ModelConfig::desk();
  bool sspt = true;
  bool sipt = true;
  int epochs = 50;
  int batch_size = 4;
  double lr = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  int n_negatives = 3;
  int sipt_bins = 32;
  /// Checkpoints go to out_dir/ckpt/{epoch}.bin|.json when set.
  std::filesystem::path out_dir;
  /// Checkpoint to continue from.
  std::filesystem::path resume;
  int stop_after_epoch = -1;  // stop early (for resumable runs); -1 = never
  /// speech.* / text.* tensors to start from instead of random weights.
  std::vector<NamedTensor> init_weights;
};

struct PretrainEpoch {
  int epoch = 0;
  double la = 0.0;
  double ls = 0.0;
  double lp = 0.0;
  double sipt = 0.0;
  double seconds = 0.0;
};

struct PretrainResult {
  /// speech.* and text.* tensors, shaped for the fine-tuning model.
  std::vector<NamedTensor> weights;
  bool trained = false;
  std::vector<PretrainEpoch> history;
  /// Vocabulary the text encoder was built with.
  std::vector<std::string> vocabulary;
};

/// Throws MissingTranscripts when SSPT is enabled and an instance lacks one.
PretrainResult run_pretraining(const std::vector<Instance>& instances, const SchemaStore& schemas,
                               const Vocabulary& vocab, const PretrainConfig& cfg);

/// Copies pre-trained speech/text tensors into a model. Throws
/// CheckpointMismatch on a shape disagreement.
LoadReport apply_pretrained(Model& model, const std::vector<NamedTensor>& weights);

/// Reads the weights saved by run_pretraining's final checkpoint.
PretrainResult read_pretrained(const std::filesystem::path& path);
void write_pretrained(const std::filesystem::path& path, const PretrainResult& result);

}  // namespace speechsql
