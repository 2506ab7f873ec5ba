#include "speechsql/pretrain.hpp"
#include "speechsql/sql.hpp"
#include "speechsql/train.hpp"
#include "support.hpp"

#include <cmath>

using namespace speechsql;

namespace {

ModelConfig small_model() {
  auto cfg = ModelConfig::desk(16);
  cfg.input_frames = 32;
  return cfg;
}

struct Fixture {
  const SchemaStore& schemas = testing::shipped_schemas();
  std::vector<Instance> instances = build_instances(synth_records(schemas, 12, {2}), schemas, default_grammar());
  Vocabulary vocab = build_vocabulary(schemas, instances);
  ModelConfig cfg = small_model();
};

Instance wimmera_instance() {
  ManifestRecord r{"w1", "wimmera_league", "pseudo:lowest draws with more than 1 byes",
                   std::vector<std::string>{"lowest", "draws", "with", "more", "than", "1", "byes"},
                   "SELECT MIN(draws) FROM wimmera WHERE byes > 1"};
  return build_instance(r, testing::shipped_schemas().at("wimmera_league"), default_grammar(), {});
}

}  // namespace

TEST_SUITE("pretrain") {
  TEST_CASE("equal similarities give log(N - 1)") {
    std::mt19937_64 rng(1);
    for (int n : {2, 4, 8}) {
      ag::Matrix ha = testing::random_matrix(1, 5, rng).replicate(n, 1);
      ag::Matrix hs = testing::random_matrix(1, 5, rng).replicate(n, 1);
      auto l = contrastive_loss(ag::constant(ha), ag::constant(hs));
      CHECK(std::abs(l.scalar() - std::log(n - 1.0)) < 1e-6);
    }
    CHECK_CODE(contrastive_loss(ag::constant(ag::Matrix::Ones(1, 3)), ag::constant(ag::Matrix::Ones(1, 3))),
               ErrorCode::kBatchTooSmall);
  }

  TEST_CASE("contrastive loss matches a direct evaluation") {
    std::mt19937_64 rng(2);
    ag::Matrix ha = testing::random_matrix(4, 6, rng), hs = testing::random_matrix(4, 6, rng);
    double expected = 0.0;
    for (int b = 0; b < 4; ++b) {
      double denom = 0.0, pos = 0.0;
      for (int i = 0; i < 4; ++i) {
        double s = ha.row(b).dot(hs.row(i)) / (ha.row(b).norm() * hs.row(i).norm());
        if (i == b) pos = s;
        else denom += std::exp(s);
      }
      expected += std::log(denom) - pos;
    }
    CHECK(contrastive_loss(ag::constant(ha), ag::constant(hs)).scalar() == doctest::Approx(expected / 4));
  }

  TEST_CASE("reconstruction divergence") {
    std::mt19937_64 rng(3);
    ag::Matrix t = testing::random_matrix(6, 96, rng);
    CHECK(std::abs(kl_rows(t, ag::constant(t)).scalar()) < 1e-12);
    CHECK(std::abs(kl_rows(t, ag::constant((t.array() + 3.0).matrix())).scalar()) < 1e-12);
    CHECK(kl_rows(t, ag::constant(testing::random_matrix(6, 96, rng))).scalar() > 0.0);
  }

  TEST_CASE("a random batch gives finite nonnegative terms") {
    Fixture fx;
    std::mt19937_64 rng(4);
    ParamStore store;
    init_speech_encoder(store, fx.cfg.speech, rng);
    init_schema_encoder(store, fx.cfg.schema, fx.vocab.size(), rng);
    init_pretrain_heads(store, fx.cfg, fx.vocab.size(), 8, rng);
    std::vector<ag::Matrix> feats;
    PairBatch batch;
    for (int i = 0; i < 4; ++i) feats.push_back(pad_or_resample(fx.instances[i].features, fx.cfg.input_frames).data);
    for (int i = 0; i < 4; ++i) {
      batch.speech.push_back(&feats[i]);
      batch.transcripts.push_back(fx.vocab.encode(*fx.instances[i].transcript));
    }
    ag::Context ctx(true, 1);
    auto l = sspt_loss(ctx, store, fx.cfg, batch);
    CHECK(std::isfinite(l.total.scalar()));
    CHECK(l.la.scalar() >= 0.0);
    CHECK(l.ls.scalar() >= 0.0);
    CHECK(l.total.scalar() == doctest::Approx(l.la.scalar() + l.ls.scalar() + l.lp.scalar()));

    PairBatch one;
    one.speech = {&feats[0]};
    one.transcripts = {batch.transcripts[0]};
    CHECK_CODE(sspt_loss(ctx, store, fx.cfg, one), ErrorCode::kBatchTooSmall);
  }

  TEST_CASE("speech-item labels follow the gold SQL") {
    auto inst = wimmera_instance();
    const auto& schema = testing::shipped_schemas().at("wimmera_league");
    auto ex = sipt_examples(inst, schema, 10, 1);
    std::map<std::string, int> label;
    for (const auto& e : ex) label[e.column] = e.label;
    CHECK(label.at("draws") == 1);
    CHECK(label.at("byes") == 1);
    CHECK(label.at("wins") == 0);
    CHECK(ex.size() == 6);

    auto few = sipt_examples(inst, schema, 2, 1);
    CHECK(few.size() == 4);
    auto again = sipt_examples(inst, schema, 2, 1);
    for (std::size_t i = 0; i < few.size(); ++i) CHECK(few[i].column == again[i].column);

    inst.gold_sql = "SELECT wimmera_fl, wins, byes, losses, draws, against FROM wimmera";
    auto all = sipt_examples(inst, schema, 3, 1);
    CHECK(all.size() == 6);
    for (const auto& e : all) CHECK(e.label == 1);
  }

  TEST_CASE("adaptive pooling rows average their bin") {
    auto p = adaptive_pool_matrix(10, 4);
    for (int k = 0; k < 4; ++k) CHECK(p.col(k).sum() == doctest::Approx(1.0));
    CHECK(p(0, 0) == doctest::Approx(1.0 / 3.0));
    auto up = adaptive_pool_matrix(2, 5);
    for (int k = 0; k < 5; ++k) CHECK(up.col(k).sum() == doctest::Approx(1.0));
  }

  TEST_CASE("speech-item loss arithmetic") {
    Fixture fx;
    auto inst = wimmera_instance();
    std::mt19937_64 rng(5);
    ParamStore store;
    init_speech_encoder(store, fx.cfg.speech, rng);
    init_schema_encoder(store, fx.cfg.schema, fx.vocab.size(), rng);
    init_pretrain_heads(store, fx.cfg, fx.vocab.size(), 8, rng);
    auto ex = sipt_examples(inst, testing::shipped_schemas().at("wimmera_league"), 3, 0);
    ag::Context ctx;
    std::vector<double> probs;

    auto random = sipt_loss(ctx, store, fx.cfg, fx.vocab, ex, &probs);
    CHECK(std::isfinite(random.scalar()));
    for (double p : probs) CHECK((p > 0.0 && p < 1.0));

    store.at("sipt.w").value.setZero();
    std::vector<SIPTExample> single = {ex.front()};
    CHECK(sipt_loss(ctx, store, fx.cfg, fx.vocab, single).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    store.at("sipt.b").value(0, 0) = 40.0;
    CHECK(sipt_loss(ctx, store, fx.cfg, fx.vocab, single).scalar() < 1e-6);
    CHECK_CODE(sipt_loss(ctx, store, fx.cfg, fx.vocab, {}), ErrorCode::kEmptyExamples);
  }

  TEST_CASE("disabled stages return untrained weights that fit the model") {
    Fixture fx;
    PretrainConfig pc;
    pc.model = fx.cfg;
    pc.sspt = false;
    pc.sipt = false;
    auto r = run_pretraining(fx.instances, fx.schemas, fx.vocab, pc);
    CHECK_FALSE(r.trained);
    CHECK(r.history.empty());
    Model model(fx.cfg, default_grammar(), fx.vocab, fx.schemas, 1);
    auto report = apply_pretrained(model, r.weights);
    CHECK(report.shape_mismatch.empty());
    CHECK(report.unexpected.empty());
    CHECK(report.loaded == r.weights.size());
  }

  TEST_CASE("missing transcripts are reported") {
    Fixture fx;
    fx.instances[3].transcript.reset();
    PretrainConfig pc;
    pc.model = fx.cfg;
    pc.epochs = 1;
    CHECK_CODE(run_pretraining(fx.instances, fx.schemas, fx.vocab, pc), ErrorCode::kMissingTranscripts);
  }

  TEST_CASE("resuming reproduces the uninterrupted run") {
    Fixture fx;
    auto dir = testing::scratch_dir("pretrain_resume");
    PretrainConfig pc;
    pc.model = fx.cfg;
    pc.epochs = 4;
    pc.seed = 3;
    pc.sipt_bins = 8;
    pc.out_dir = dir / "full";
    auto full = run_pretraining(fx.instances, fx.schemas, fx.vocab, pc);
    REQUIRE(full.history.size() == 4);
    CHECK(std::filesystem::exists(dir / "full" / "ckpt" / "2.bin"));
    CHECK(std::filesystem::exists(dir / "full" / "ckpt" / "2.json"));

    PretrainConfig rc = pc;
    rc.out_dir = dir / "resumed";
    rc.resume = dir / "full" / "ckpt" / "2.bin";
    auto resumed = run_pretraining(fx.instances, fx.schemas, fx.vocab, rc);
    REQUIRE(resumed.history.size() == 4);
    auto total = [](const PretrainEpoch& e) { return e.la + e.ls + e.lp + e.sipt; };
    CHECK(total(resumed.history[1]) == total(full.history[1]));
    CHECK(std::abs(total(resumed.history[2]) - total(full.history[2])) <= 0.05 * total(full.history[2]));
    CHECK(std::abs(total(resumed.history[3]) - total(full.history[3])) < 1e-9);

    write_pretrained(dir / "pre.bin", full);
    auto back = read_pretrained(dir / "pre.bin");
    CHECK(back.trained);
    CHECK(back.history.size() == 4);
    CHECK(back.weights.size() == full.weights.size());
    CHECK(back.vocabulary == fx.vocab.words());
  }

  TEST_CASE("gradient checks on the pre-training losses") {
    for (const char* id : {"sspt_loss", "sipt_loss"}) {
      auto r = grad_check(id);
      CHECK_MESSAGE(r.max_rel_error < 1e-4, id, " ", r.worst_parameter);
    }
  }
}
