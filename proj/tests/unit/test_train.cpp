#include "speechsql/sql.hpp"
#include "speechsql/train.hpp"
#include "support.hpp"

#include <cmath>
#include <fstream>

using namespace speechsql;

namespace {

ModelConfig small_model() {
  auto cfg = ModelConfig::desk(16);
  cfg.input_frames = 32;
  return cfg;
}

struct Fixture {
  const SchemaStore& schemas = testing::shipped_schemas();
  std::vector<Instance> instances = build_instances(synth_records(schemas, 16, {6}), schemas, default_grammar());
  Vocabulary vocab = build_vocabulary(schemas, instances);
};

// Sum over gold steps of log(number of legal actions in the frontier's family).
double uniform_loss_oracle(const Instance& inst, const Schema& schema) {
  SchemaCatalog cat(schema);
  const int nv = static_cast<int>(inst.candidate_values.size());
  ActionSpace space{default_grammar().n_rules(), cat.n_columns(), cat.n_tables(), nv};
  DerivationState st(default_grammar(), 0);
  double total = 0.0;
  for (const auto& a : inst.gold_actions) {
    auto mask = legal_actions(st, cat, nv);
    int k = 0;
    for (int i = 0; i < space.size(); ++i)
      if (mask[i] && space.unflat(i).kind == a.kind) ++k;
    total += std::log(static_cast<double>(k));
    st.apply(a, cat, nv);
  }
  return total;
}

TrainConfig quick_train(int epochs) {
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  tc.max_epochs = epochs;
  tc.seed = 9;
  return tc;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("a uniform decoder costs the log of the legal counts") {
    Fixture fx;
    Model model(small_model(), default_grammar(), fx.vocab, fx.schemas, 1);
    for (const char* name : {"decoder.w_p", "decoder.b_p", "decoder.w_s", "decoder.w_v"})
      model.params().at(name).value.setZero();
    for (const auto& inst : fx.instances) {
      double expected = uniform_loss_oracle(inst, fx.schemas.at(inst.db_id));
      CHECK(finetune_loss(model, inst) == doctest::Approx(expected).epsilon(1e-10));
    }
  }

  TEST_CASE("a forced derivation costs nothing") {
    SchemaStore store;
    Schema s;
    s.db_id = "one";
    s.tables = {{"t", {{"a"}}}};
    store.emplace("one", s);
    Grammar g = load_grammar("Z := A\nA := none C T\n");
    Instance inst;
    inst.id = "x";
    inst.db_id = "one";
    inst.features = synth_pseudo_speech({"show", "a"});
    inst.gold_sql = "SELECT a FROM t";
    inst.gold_actions = {Action::rule(0), Action::rule(1), Action::column(0), Action::table(0)};
    Vocabulary vocab = build_vocabulary(store, {inst});
    Model model(small_model(), g, vocab, store, 1);
    CHECK(finetune_loss(model, inst) == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("random parameters give a finite positive loss on every instance") {
    Fixture fx;
    Model model(small_model(), default_grammar(), fx.vocab, fx.schemas, 2);
    for (const auto& inst : fx.instances) {
      double l = finetune_loss(model, inst);
      CHECK(std::isfinite(l));
      CHECK(l > 0.0);
    }
  }

  TEST_CASE("masked gold actions name the instance") {
    Fixture fx;
    Model model(small_model(), default_grammar(), fx.vocab, fx.schemas, 2);
    Instance bad = fx.instances[0];
    bad.gold_actions.insert(bad.gold_actions.begin(), Action::column(0));
    try {
      finetune_loss(model, bad);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kGoldActionMasked);
      CHECK(std::string(e.what()).find(bad.id) != std::string::npos);
    }
  }

  TEST_CASE("training is deterministic for a seed") {
    Fixture fx;
    auto run = [&] {
      Model model(small_model(), default_grammar(), fx.vocab, fx.schemas, 4);
      return train_loop(model, fx.instances, fx.instances, quick_train(1)).history.at(0).train_loss;
    };
    double a = run(), b = run();
    CHECK(std::abs(a - b) < 1e-6);
  }

  TEST_CASE("training writes checkpoints that reload exactly") {
    Fixture fx;
    auto dir = testing::scratch_dir("train_ckpt");
    Model model(small_model(), default_grammar(), fx.vocab, fx.schemas, 5);
    auto tc = quick_train(2);
    tc.out_dir = dir;
    auto report = train_loop(model, fx.instances, fx.instances, tc);
    REQUIRE(report.history.size() == 2);
    for (const char* f : {"ckpt/1.bin", "ckpt/1.json", "ckpt/2.bin", "ckpt/2.json", "best.bin", "history.csv"})
      CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
    std::ifstream csv(dir / "history.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "epoch,train_loss,val_query_acc,seconds");

    model.save(dir / "probe.bin", R"({"note": "probe"})");
    std::string extra;
    auto loaded = load_model(dir / "probe.bin", fx.schemas, &extra);
    CHECK(extra.find("probe") != std::string::npos);
    for (const auto& inst : fx.instances) {
      CHECK(finetune_loss(*loaded, inst) == finetune_loss(model, inst));
      CHECK(loaded->predict_sql(inst) == model.predict_sql(inst));
    }

    Model other(ModelConfig::desk(24), default_grammar(), fx.vocab, fx.schemas, 5);
    CHECK_CODE(other.load_weights(dir / "probe.bin"), ErrorCode::kCheckpointMismatch);
  }

  TEST_CASE("freezing the text encoder keeps its weights") {
    Fixture fx;
    Model model(small_model(), default_grammar(), fx.vocab, fx.schemas, 6);
    auto before = model.params().at("text.embed").value;
    auto speech_before = model.params().at("speech.proj.w").value;
    auto tc = quick_train(1);
    tc.freeze_text_encoder = true;
    train_loop(model, fx.instances, fx.instances, tc);
    CHECK(model.params().at("text.embed").value == before);
    CHECK(model.params().at("speech.proj.w").value != speech_before);
  }

  TEST_CASE("ablations bypass linking and fusion exactly") {
    Fixture fx;
    const Instance& inst = fx.instances[0];
    for (int variant = 0; variant < 2; ++variant) {
      auto cfg = small_model();
      cfg.no_linking = variant == 0;
      cfg.no_fusion = variant == 1;
      Model model(cfg, default_grammar(), fx.vocab, fx.schemas, 7);
      ag::Context ctx;
      auto enc = model.encode(ctx, {&inst});
      const auto& e = enc[0];
      if (cfg.no_linking) {
        CHECK_FALSE(e.link.defined());
        std::vector<bool> mask(static_cast<std::size_t>(e.za_raw.rows()), false);
        for (Eigen::Index r = 0; r < e.inputs.za_valid; ++r) mask[static_cast<std::size_t>(r)] = true;
        auto direct = fuse(ctx, model.params(), cfg.fusion, e.za_raw, e.zs_raw, mask);
        CHECK(e.inputs.za.value() == direct.za.value());
        CHECK(e.inputs.zs.value() == direct.zs.value());
      } else {
        auto direct = apply_linking(e.za_raw, e.zs_raw, link_scores(e.za_raw, e.zs_raw));
        CHECK(e.inputs.za.value() == direct.value());
        CHECK(e.inputs.zs.value() == e.zs_raw.value());
      }
    }
  }

  TEST_CASE("model configuration round-trips through JSON") {
    auto cfg = ModelConfig::desk(64);
    cfg.no_fusion = true;
    cfg.schema.use_gcn = false;
    auto back = model_config_from_json(model_config_to_json(cfg));
    CHECK(model_config_to_json(back) == model_config_to_json(cfg));
    auto paper = ModelConfig::paper();
    CHECK(paper.d_model() == 512);
    CHECK(paper.speech.channels == 128);
    CHECK(paper.fusion.dropout == doctest::Approx(0.3));
    CHECK(TrainConfig::paper().lr == doctest::Approx(1e-4));
    CHECK(TrainConfig::paper().batch_size == 256);
    CHECK(TrainConfig::paper().lr_decay == doctest::Approx(0.8));
  }

  TEST_CASE("gradient checks cover every component") {
    for (const auto& id : grad_check_components()) {
      auto r = grad_check(id);
      CHECK_MESSAGE(r.max_rel_error < 1e-4, id, " worst ", r.worst_parameter);
    }
    CHECK_CODE(grad_check("nonexistent"), ErrorCode::kUnknownComponent);
  }
}
