#include "speechsql/decoder.hpp"

#include "speechsql/error.hpp"

#include <cmath>
#include <limits>

namespace speechsql {

namespace {

int action_row(const Action& a, int n_rules) {
  switch (a.kind) {
    case ActionKind::kApplyRule: return a.index;
    case ActionKind::kSelectColumn: return n_rules;
    case ActionKind::kSelectTable: return n_rules + 1;
    case ActionKind::kSelectValue: return n_rules + 2;
  }
  return 0;
}

ActionKind family_of(NonTerminal nt) {
  switch (nt) {
    case NonTerminal::kC: return ActionKind::kSelectColumn;
    case NonTerminal::kT: return ActionKind::kSelectTable;
    case NonTerminal::kV: return ActionKind::kSelectValue;
    default: return ActionKind::kApplyRule;
  }
}

}  // namespace

void init_decoder(ParamStore& store, const DecoderConfig& cfg, int n_rules, std::mt19937_64& rng) {
  const int d = cfg.hidden;
  const int in = cfg.d_action + cfg.d_type + d;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  store.create("decoder.lstm.wx", init::uniform(in, 4 * d, bound, rng));
  store.create("decoder.lstm.wh", init::uniform(d, 4 * d, bound, rng));
  ag::Matrix b = ag::Matrix::Zero(1, 4 * d);
  b.middleCols(d, d).setOnes();
  store.create("decoder.lstm.b", std::move(b));
  store.create("decoder.w_a", init::xavier(d, d, rng));
  store.create("decoder.w_u", init::xavier(2 * d, d, rng));
  store.create("decoder.b_u", init::zeros(1, d));
  store.create("decoder.w_p", init::xavier(d, n_rules, rng));
  store.create("decoder.b_p", init::zeros(1, n_rules));
  store.create("decoder.w_s", init::xavier(d, d, rng));
  store.create("decoder.w_v", init::xavier(d, d, rng));
  store.create("decoder.action_embed", init::uniform(n_rules + 3, cfg.d_action, 0.1, rng));
  store.create("decoder.type_embed", init::uniform(kNumNonTerminals, cfg.d_type, 0.1, rng));
}

std::vector<double> StepOutput::probs() const {
  std::vector<double> out(static_cast<std::size_t>(space.size()), 0.0);
  const int off = space.offset(family);
  for (Eigen::Index j = 0; j < log_probs.cols(); ++j) out[static_cast<std::size_t>(off + j)] = std::exp(log_probs.value()(0, j));
  return out;
}

DecoderState init_state(const DecoderInputs& in, const Grammar& grammar, const DecoderConfig& cfg) {
  if (!in.za.defined() || in.za.rows() == 0 || in.za_valid == 0)
    throw Error(ErrorCode::kEmptyEmbedding, "speech embedding has no rows");
  if (in.za.cols() != cfg.hidden)
    throw Error(ErrorCode::kShapeMismatch, "speech embedding width differs from decoder hidden size");
  DecoderState s{ag::max_rows(in.za, in.za_valid),
                 ag::constant(ag::Matrix::Zero(1, cfg.hidden)),
                 ag::constant(ag::Matrix::Zero(1, cfg.hidden)),
                 DerivationState(grammar, cfg.max_steps),
                 std::nullopt,
                 std::nullopt};
  return s;
}

StepOutput step(ag::Context& ctx, ParamStore& store, const DecoderConfig& cfg, const DecoderInputs& in,
                DecoderState& state) {
  const auto frontier = state.derivation.frontier();
  if (!frontier) throw Error(ErrorCode::kCompleteDerivation, "derivation is already complete");
  auto P = [&](const char* name) { return ctx.param(store.at(name)); };
  const Grammar& grammar = state.derivation.grammar();

  ag::Var a_prev = state.prev_action ? ag::gather_rows(P("decoder.action_embed"), {*state.prev_action})
                                     : ag::constant(ag::Matrix::Zero(1, cfg.d_action));
  ag::Var n_prev = state.prev_type ? ag::gather_rows(P("decoder.type_embed"), {static_cast<int>(*state.prev_type)})
                                   : ag::constant(ag::Matrix::Zero(1, cfg.d_type));
  ag::Var x = ag::hcat({a_prev, n_prev, state.context});
  ag::Var hc = ag::lstm_cell(x, state.h, state.cell, P("decoder.lstm.wx"), P("decoder.lstm.wh"), P("decoder.lstm.b"));
  state.h = ag::slice_cols(hc, 0, cfg.hidden);
  state.cell = ag::slice_cols(hc, cfg.hidden, cfg.hidden);

  std::vector<bool> key_valid;
  if (in.za_valid >= 0 && in.za_valid < in.za.rows()) {
    key_valid.assign(static_cast<std::size_t>(in.za.rows()), false);
    for (Eigen::Index i = 0; i < in.za_valid; ++i) key_valid[static_cast<std::size_t>(i)] = true;
  }
  state.context = ag::attention(ag::matmul(state.h, P("decoder.w_a")), in.za, in.za, 1, key_valid, 1.0);
  ag::Var u = ag::tanh(ag::linear(ag::hcat({state.h, state.context}), P("decoder.w_u"), P("decoder.b_u")));

  StepOutput out;
  out.space = ActionSpace{grammar.n_rules(), in.catalog->n_columns(), in.catalog->n_tables(), in.n_candidates};
  out.legal = legal_actions(state.derivation, *in.catalog, in.n_candidates);
  out.family = family_of(*frontier);
  const int off = out.space.offset(out.family);
  ag::Var logits;
  int width = 0;
  switch (out.family) {
    case ActionKind::kApplyRule:
      width = grammar.n_rules();
      logits = ag::tanh(ag::linear(u, P("decoder.w_p"), P("decoder.b_p")));
      break;
    case ActionKind::kSelectColumn:
      width = in.catalog->n_columns();
      logits = ag::matmul_nt(ag::matmul(u, P("decoder.w_s")), ag::slice_rows(in.zs, in.catalog->n_tables(), width));
      break;
    case ActionKind::kSelectTable:
      width = in.catalog->n_tables();
      logits = ag::matmul_nt(ag::matmul(u, P("decoder.w_s")), ag::slice_rows(in.zs, 0, width));
      break;
    case ActionKind::kSelectValue:
      width = in.n_candidates;
      if (width == 0) throw Error(ErrorCode::kMaxStepsExceeded, "a value is required but there are no candidates");
      logits = ag::matmul_nt(ag::matmul(u, P("decoder.w_v")), in.values);
      break;
  }
  std::vector<bool> family_mask(out.legal.begin() + off, out.legal.begin() + off + width);
  bool any = false;
  for (bool b : family_mask) any = any || b;
  if (!any) throw Error(ErrorCode::kMaxStepsExceeded, "no legal action at step " + std::to_string(state.derivation.steps()));
  out.log_probs = ag::masked_log_softmax(logits, family_mask);
  return out;
}

void commit(DecoderState& state, const Action& a, const DecoderInputs& in) {
  const auto frontier = state.derivation.frontier();
  state.derivation.apply(a, *in.catalog, in.n_candidates);
  state.prev_action = action_row(a, state.derivation.grammar().n_rules());
  state.prev_type = frontier;
}

ag::Var teacher_forced_loss(ag::Context& ctx, ParamStore& store, const DecoderConfig& cfg, const Grammar& grammar,
                            const DecoderInputs& in, const ActionSequence& gold) {
  DecoderConfig replay = cfg;
  replay.max_steps = 0;
  DecoderState state = init_state(in, grammar, replay);
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (state.derivation.complete())
      throw Error(ErrorCode::kGoldActionMasked, "gold sequence continues past a complete derivation at step " +
                                                    std::to_string(i));
    StepOutput out = step(ctx, store, cfg, in, state);
    const Action& a = gold[i];
    if (a.kind != out.family || !out.legal[static_cast<std::size_t>(out.space.flat(a))])
      throw Error(ErrorCode::kGoldActionMasked,
                  "gold action " + format_action(a, grammar, in.catalog) + " is masked at step " + std::to_string(i));
    terms.push_back(ag::pick(out.log_probs, 0, a.index));
    commit(state, a, in);
  }
  if (terms.empty()) throw Error(ErrorCode::kGoldActionMasked, "empty gold sequence");
  return ag::scale(ag::sum(ag::hcat(terms)), -1.0);
}

ActionSequence decode(ParamStore& store, const DecoderConfig& cfg, const Grammar& grammar, const DecoderInputs& in,
                      const DecodeOptions& opts) {
  ag::Context ctx(false, opts.seed, false);
  DecoderState state = init_state(in, grammar, cfg);
  std::mt19937_64 rng(opts.seed);
  const int cap = cfg.max_steps > 0 ? cfg.max_steps : kDefaultMaxSteps;
  while (!state.derivation.complete()) {
    if (state.derivation.steps() >= cap)
      throw Error(ErrorCode::kMaxStepsExceeded, "derivation incomplete after " + std::to_string(cap) + " steps");
    StepOutput out = step(ctx, store, cfg, in, state);
    const ag::Matrix& lp = out.log_probs.value();
    Eigen::Index best = -1;
    if (opts.sample) {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      double r = unit(rng), acc = 0.0;
      for (Eigen::Index j = 0; j < lp.cols(); ++j) {
        if (!std::isfinite(lp(0, j))) continue;
        best = j;
        acc += std::exp(lp(0, j));
        if (r < acc) break;
      }
    } else {
      double top = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < lp.cols(); ++j)
        if (lp(0, j) > top) {
          top = lp(0, j);
          best = j;
        }
    }
    commit(state, Action{out.family, static_cast<int>(best)}, in);
  }
  return state.derivation.actions();
}

}  // namespace speechsql
