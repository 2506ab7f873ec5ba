#pragma once

// Grammar-guided LSTM decoder: rule softmax, schema pointer and value
// pointer under legality masks.

#include "speechsql/autograd.hpp"
#include "speechsql/params.hpp"
#include "speechsql/semql.hpp"

#include <optional>
#include <random>
#include <vector>

namespace speechsql {

struct DecoderConfig {
  int hidden = 512;  // equals d_model
  int d_action = 12;
  int d_type = 12;
  int max_steps = kDefaultMaxSteps;
};

void init_decoder(ParamStore& store, const DecoderConfig& cfg, int n_rules, std::mt19937_64& rng);

/// Encoder outputs the decoder reads. Z_s rows follow SchemaGraph node order
/// (tables, then merged columns); values holds one row per candidate.
struct DecoderInputs {
  ag::Var za;
  Eigen::Index za_valid = -1;  // unpadded prefix length; -1 = all rows
  ag::Var zs;
  ag::Var values;  // may be undefined when there are no candidates
  const SchemaCatalog* catalog = nullptr;
  int n_candidates = 0;
};

struct DecoderState {
  ag::Var h;
  ag::Var cell;
  ag::Var context;
  DerivationState derivation;
  std::optional<int> prev_action;  // row of decoder.action_embed
  std::optional<NonTerminal> prev_type;
};

/// Log-probabilities for the family selected by the frontier, plus the
/// full-space view.
struct StepOutput {
  ActionKind family = ActionKind::kApplyRule;
  ag::Var log_probs;            // 1 x family size, -inf on illegal entries
  std::vector<bool> legal;      // full ActionSpace mask
  ActionSpace space;
  std::vector<double> probs() const;  // full ActionSpace probabilities
};

/// h0 = column max over valid Z_a rows. Throws EmptyEmbedding.
DecoderState init_state(const DecoderInputs& in, const Grammar& grammar, const DecoderConfig& cfg);

/// Advances the recurrent state and scores the next action. Throws
/// CompleteDerivation.
StepOutput step(ag::Context& ctx, ParamStore& store, const DecoderConfig& cfg, const DecoderInputs& in,
                DecoderState& state);

/// Applies the chosen action and records it as the next step's input.
void commit(DecoderState& state, const Action& a, const DecoderInputs& in);

/// -sum log p(gold) under teacher forcing. Throws GoldActionMasked.
ag::Var teacher_forced_loss(ag::Context& ctx, ParamStore& store, const DecoderConfig& cfg, const Grammar& grammar,
                            const DecoderInputs& in, const ActionSequence& gold);

struct DecodeOptions {
  bool sample = false;        // draw from the distribution instead of argmax
  std::uint64_t seed = 0;
};

/// Throws MaxStepsExceeded when the derivation is incomplete at the cap.
ActionSequence decode(ParamStore& store, const DecoderConfig& cfg, const Grammar& grammar, const DecoderInputs& in,
                      const DecodeOptions& opts = {});

}  // namespace speechsql
