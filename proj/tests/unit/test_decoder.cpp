#include "speechsql/decoder.hpp"
#include "speechsql/model.hpp"
#include "speechsql/sql.hpp"
#include "speechsql/train.hpp"
#include "support.hpp"

#include <cmath>
#include <numeric>

using namespace speechsql;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Schema three_columns() {
  Schema s;
  s.db_id = "t3";
  s.tables = {{"t", {{"a"}, {"b"}, {"c"}}}};
  return s;
}

struct Toy {
  Grammar grammar = load_grammar("Z := C T\nZ := C\n");
  DecoderConfig cfg{2, 1, 1, kDefaultMaxSteps};
  ParamStore store;
  Schema schema = three_columns();
  SchemaCatalog catalog{schema};
  DecoderInputs in;

  Toy() {
    std::mt19937_64 rng(21);
    init_decoder(store, cfg, grammar.n_rules(), rng);
    in.za = ag::constant((ag::Matrix(3, 2) << 0.5, -1.0, 1.5, 0.25, -0.75, 0.8).finished());
    in.zs = ag::constant(testing::random_matrix(4, 2, rng));
    in.catalog = &catalog;
  }
};

DecoderInputs random_inputs(const SchemaCatalog& cat, int d, int n_values, std::mt19937_64& rng) {
  DecoderInputs in;
  in.za = ag::constant(testing::random_matrix(5, d, rng));
  in.zs = ag::constant(testing::random_matrix(cat.n_tables() + cat.n_columns(), d, rng));
  if (n_values > 0) in.values = ag::constant(testing::random_matrix(n_values, d, rng));
  in.catalog = &cat;
  in.n_candidates = n_values;
  return in;
}

}  // namespace

TEST_SUITE("decoder") {
  TEST_CASE("initial hidden state is the column-wise max") {
    Toy toy;
    auto s = init_state(toy.in, toy.grammar, toy.cfg);
    CHECK(s.h.value() == (ag::Matrix(1, 2) << 1.5, 0.8).finished());

    DecoderInputs two = toy.in;
    two.za = ag::constant((ag::Matrix(2, 2) << 1, 0, 0, 2).finished());
    CHECK(init_state(two, toy.grammar, toy.cfg).h.value() == (ag::Matrix(1, 2) << 1, 2).finished());

    DecoderInputs one = toy.in;
    one.za = ag::constant((ag::Matrix(1, 2) << -3, 4).finished());
    CHECK(init_state(one, toy.grammar, toy.cfg).h.value() == one.za.value());

    DecoderInputs prefix = toy.in;
    prefix.za_valid = 1;
    CHECK(init_state(prefix, toy.grammar, toy.cfg).h.value() == (ag::Matrix(1, 2) << 0.5, -1.0).finished());

    DecoderInputs empty = toy.in;
    empty.za = ag::constant(ag::Matrix(0, 2));
    CHECK_CODE(init_state(empty, toy.grammar, toy.cfg), ErrorCode::kEmptyEmbedding);
  }

  TEST_CASE("wide speech embedding gives a wide hidden state") {
    DecoderConfig cfg;
    std::mt19937_64 rng(22);
    Schema s = three_columns();
    SchemaCatalog cat(s);
    auto in = random_inputs(cat, 512, 0, rng);
    CHECK(init_state(in, default_grammar(), cfg).h.cols() == 512);
  }

  TEST_CASE("first rule distribution matches hand arithmetic") {
    Toy toy;
    auto& st = toy.store;
    auto state = init_state(toy.in, toy.grammar, toy.cfg);
    ag::Context ctx;
    auto out = step(ctx, st, toy.cfg, toy.in, state);
    REQUIRE(out.family == ActionKind::kApplyRule);

    const ag::Matrix& wh = st.at("decoder.lstm.wh").value;
    const ag::Matrix& b = st.at("decoder.lstm.b").value;
    const double h0[2] = {1.5, 0.8};
    double gate[8];
    for (int j = 0; j < 8; ++j) gate[j] = b(0, j) + h0[0] * wh(0, j) + h0[1] * wh(1, j);  // input is all zero
    double h1[2];
    for (int k = 0; k < 2; ++k) {
      double i = sigmoid(gate[k]), g = std::tanh(gate[4 + k]), o = sigmoid(gate[6 + k]);
      h1[k] = o * std::tanh(i * g);
    }
    const ag::Matrix& wa = st.at("decoder.w_a").value;
    const ag::Matrix& za = toy.in.za.value();
    double q[2] = {h1[0] * wa(0, 0) + h1[1] * wa(1, 0), h1[0] * wa(0, 1) + h1[1] * wa(1, 1)};
    double score[3], z = 0.0;
    for (int r = 0; r < 3; ++r) z += score[r] = std::exp(q[0] * za(r, 0) + q[1] * za(r, 1));
    double c[2] = {0.0, 0.0};
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 2; ++k) c[k] += score[r] / z * za(r, k);
    const ag::Matrix& wu = st.at("decoder.w_u").value;
    const ag::Matrix& bu = st.at("decoder.b_u").value;
    double hc[4] = {h1[0], h1[1], c[0], c[1]};
    double u[2];
    for (int k = 0; k < 2; ++k) {
      double acc = bu(0, k);
      for (int j = 0; j < 4; ++j) acc += hc[j] * wu(j, k);
      u[k] = std::tanh(acc);
    }
    const ag::Matrix& wp = st.at("decoder.w_p").value;
    const ag::Matrix& bp = st.at("decoder.b_p").value;
    double logit[2];
    for (int r = 0; r < 2; ++r) logit[r] = std::tanh(bp(0, r) + u[0] * wp(0, r) + u[1] * wp(1, r));
    double p0 = 1.0 / (1.0 + std::exp(logit[1] - logit[0]));

    auto probs = out.probs();
    CHECK(std::abs(probs[0] - p0) < 1e-9);
    CHECK(std::abs(probs[1] - (1.0 - p0)) < 1e-9);
  }

  TEST_CASE("column step puts all mass on the three legal columns") {
    Toy toy;
    ag::Context ctx;
    auto state = init_state(toy.in, toy.grammar, toy.cfg);
    step(ctx, toy.store, toy.cfg, toy.in, state);
    commit(state, Action::rule(0), toy.in);
    auto out = step(ctx, toy.store, toy.cfg, toy.in, state);
    REQUIRE(out.family == ActionKind::kSelectColumn);
    auto p = out.probs();
    int nonzero = 0;
    for (double v : p) nonzero += v > 0.0;
    CHECK(nonzero == 3);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("table step after a column is restricted to its tables") {
    const auto& grammar = default_grammar();
    std::mt19937_64 rng(23);
    for (auto [db, column, table] : {std::tuple{"wimmera_league", "draws", "wimmera"},
                                     std::tuple{"products_colors", "color_description", "Ref_Colors"}}) {
      const Schema& s = testing::shipped_schemas().at(db);
      SchemaCatalog cat(s);
      DecoderConfig cfg{8, 4, 4, kDefaultMaxSteps};
      ParamStore store;
      init_decoder(store, cfg, grammar.n_rules(), rng);
      auto in = random_inputs(cat, 8, 0, rng);
      auto state = init_state(in, grammar, cfg);
      ag::Context ctx;
      for (auto a : {Action::rule(grammar.find(NonTerminal::kZ, "R")), Action::rule(grammar.find(NonTerminal::kR, "Select")),
                     Action::rule(grammar.find(NonTerminal::kSelect, "A")),
                     Action::rule(grammar.find(NonTerminal::kA, "none C T")), Action::column(cat.find_column(column))}) {
        step(ctx, store, cfg, in, state);
        commit(state, a, in);
      }
      auto out = step(ctx, store, cfg, in, state);
      REQUIRE(out.family == ActionKind::kSelectTable);
      auto p = out.probs();
      CHECK(p[out.space.flat(Action::table(cat.find_table(table)))] == 1.0);
    }
  }

  TEST_CASE("stepping a complete derivation throws") {
    Toy toy;
    ag::Context ctx;
    auto state = init_state(toy.in, toy.grammar, toy.cfg);
    for (auto a : {Action::rule(1), Action::column(0)}) {
      step(ctx, toy.store, toy.cfg, toy.in, state);
      commit(state, a, toy.in);
    }
    CHECK(state.derivation.complete());
    CHECK_CODE(step(ctx, toy.store, toy.cfg, toy.in, state), ErrorCode::kCompleteDerivation);
  }

  TEST_CASE("teacher forcing rejects masked gold actions") {
    Toy toy;
    ag::Context ctx;
    auto loss = teacher_forced_loss(ctx, toy.store, toy.cfg, toy.grammar, toy.in, {Action::rule(0), Action::column(1), Action::table(0)});
    CHECK(std::isfinite(loss.scalar()));
    CHECK(loss.scalar() > 0.0);
    CHECK_CODE(teacher_forced_loss(ctx, toy.store, toy.cfg, toy.grammar, toy.in, {Action::column(0)}),
               ErrorCode::kGoldActionMasked);
    CHECK_CODE(teacher_forced_loss(ctx, toy.store, toy.cfg, toy.grammar, toy.in,
                                   {Action::rule(1), Action::column(0), Action::table(0)}),
               ErrorCode::kGoldActionMasked);
    CHECK_CODE(teacher_forced_loss(ctx, toy.store, toy.cfg, toy.grammar, toy.in, {}), ErrorCode::kGoldActionMasked);
  }

  TEST_CASE("random-parameter decodes are always grammatical") {
    const auto& grammar = default_grammar();
    std::mt19937_64 rng(24);
    int complete = 0, capped = 0;
    std::vector<std::pair<Schema, SchemaCatalog>> schemas;
    for (const auto& [id, s] : testing::shipped_schemas()) schemas.emplace_back(s, SchemaCatalog(s));
    for (int trial = 0; trial < 1000; ++trial) {
      const auto& [schema, cat] = schemas[trial % schemas.size()];
      DecoderConfig cfg{6, 3, 3, kDefaultMaxSteps};
      ParamStore store;
      init_decoder(store, cfg, grammar.n_rules(), rng);
      for (auto* p : store.all()) p->value *= 3.0;
      int n_values = 1 + trial % 3;  // value slots need at least one candidate
      auto in = random_inputs(cat, 6, n_values, rng);
      try {
        auto actions = decode(store, cfg, grammar, in, {trial % 2 == 0, static_cast<std::uint64_t>(trial)});
        REQUIRE(actions.size() <= static_cast<std::size_t>(kDefaultMaxSteps));
        build_tree(actions, grammar, cat, n_values);
        ++complete;
      } catch (const Error& e) {
        REQUIRE_MESSAGE(e.code() == ErrorCode::kMaxStepsExceeded, e.what());
        ++capped;
      }
    }
    CHECK(complete + capped == 1000);
    CHECK(complete > 900);
  }

  TEST_CASE("decoding is deterministic") {
    const auto& grammar = default_grammar();
    std::mt19937_64 rng(25);
    const Schema& s = testing::shipped_schemas().at("concert_singer");
    SchemaCatalog cat(s);
    DecoderConfig cfg{8, 4, 4, kDefaultMaxSteps};
    ParamStore store;
    init_decoder(store, cfg, grammar.n_rules(), rng);
    auto in = random_inputs(cat, 8, 2, rng);
    CHECK(decode(store, cfg, grammar, in) == decode(store, cfg, grammar, in));
    CHECK(decode(store, cfg, grammar, in, {true, 5}) == decode(store, cfg, grammar, in, {true, 5}));
  }

  TEST_CASE("a model fitted to one instance decodes its gold sequence") {
    const auto& store = testing::shipped_schemas();
    ManifestRecord r{"w1", "wimmera_league", "pseudo:what is the lowest number of draws with more than 1 byes",
                     std::vector<std::string>{"what", "is", "the", "lowest", "number", "of", "draws", "with",
                                              "more", "than", "1", "byes"},
                     "SELECT MIN(draws) FROM wimmera WHERE byes > 1"};
    auto inst = build_instances({r}, store, default_grammar());
    auto cfg = ModelConfig::desk(32);
    cfg.fusion.dropout = 0.0;
    Model model(cfg, default_grammar(), build_vocabulary(store, inst), store, 3);
    TrainConfig tc = TrainConfig::desk();
    tc.batch_size = 1;
    tc.max_epochs = 200;
    tc.target_val_acc = 1.0;
    tc.plateau_patience = 1000;
    train_loop(model, inst, inst, tc);
    CHECK(model.predict_actions(inst[0]) == inst[0].gold_actions);
  }

  TEST_CASE("gradient check on the toy decoder") {
    auto r = grad_check("decoder");
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_parameter);
  }
}
