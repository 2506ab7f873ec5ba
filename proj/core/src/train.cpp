#include "speechsql/train.hpp"

#include "speechsql/error.hpp"
#include "speechsql/eval.hpp"
#include "speechsql/pretrain.hpp"
#include "speechsql/sql.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include "json.hpp"

namespace speechsql {

using nlohmann::json;

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 16;
  return c;
}

double finetune_loss(Model& model, const Instance& instance) {
  ag::Context ctx(false, 0, false);
  return model.batch_loss(ctx, {&instance}).scalar();
}

double query_accuracy(Model& model, const std::vector<Instance>& instances) {
  if (instances.empty()) return 0.0;
  int hits = 0;
  for (const auto& inst : instances)
    if (query_match(model.predict_sql(inst), inst.gold_sql, model.schema(inst.db_id)).exact) ++hits;
  return static_cast<double>(hits) / static_cast<double>(instances.size());
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  os << "epoch,train_loss,val_query_acc,seconds\n";
  char buf[160];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.6f\n", h.epoch, h.train_loss, h.val_query_acc, h.seconds);
    os << buf;
  }
}

TrainReport train_loop(Model& model, const std::vector<Instance>& train_set, const std::vector<Instance>& val_set,
                       const TrainConfig& cfg) {
  if (train_set.empty() || val_set.empty()) throw Error(ErrorCode::kEmptyInput, "training and validation sets must be non-empty");
  if (cfg.lr <= 0.0 || cfg.batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "lr must be > 0 and batch_size >= 1");
  ParamStore& store = model.params();
  Adam adam(cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  TrainReport report;
  std::vector<NamedTensor> best = snapshot(store);
  int stale = 0;
  const std::size_t n = train_set.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::filesystem::path ckpt_dir = cfg.out_dir.empty() ? std::filesystem::path() : cfg.out_dir / "ckpt";
  if (!ckpt_dir.empty()) std::filesystem::create_directories(ckpt_dir);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t begin = 0; begin < n; begin += bs) {
      const std::size_t end = std::min(n, begin + bs);
      std::vector<const Instance*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&train_set[order[i]]);
      ag::Context ctx(true, rng());
      ag::Var loss = model.batch_loss(ctx, batch);
      total += loss.scalar();
      ag::backward(ag::scale(loss, 1.0 / static_cast<double>(batch.size())));
      ctx.accumulate_grads();
      if (cfg.freeze_text_encoder)
        for (auto* p : store.with_prefix("text.")) p->zero_grad();
      store.clip_grad_norm(cfg.clip_norm);
      adam.step(store);
      store.zero_grad();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(n);
    rec.lr = adam.lr();
    const bool validate = epoch % std::max(1, cfg.validate_every) == 0 || epoch == cfg.max_epochs;
    if (validate) {
      rec.val_query_acc = query_accuracy(model, val_set);
      if (rec.val_query_acc > report.best_val_acc) {
        report.best_val_acc = rec.val_query_acc;
        report.best_epoch = epoch;
        best = snapshot(store);
        stale = 0;
        if (!ckpt_dir.empty()) model.save(cfg.out_dir / "best.bin", json{{"epoch", epoch}, {"val_query_acc", rec.val_query_acc}}.dump());
      } else if (++stale >= cfg.plateau_patience) {
        adam.set_lr(adam.lr() * cfg.lr_decay);
        stale = 0;
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.history.push_back(rec);
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d loss %.4f val %.4f lr %.2e %.1fs\n", epoch, rec.train_loss, rec.val_query_acc,
                   rec.lr, rec.seconds);
    if (!ckpt_dir.empty()) {
      const json meta{{"epoch", epoch},
                      {"train_loss", rec.train_loss},
                      {"val_query_acc", rec.val_query_acc},
                      {"lr", rec.lr},
                      {"seconds", rec.seconds},
                      {"seed", cfg.seed}};
      model.save(ckpt_dir / (std::to_string(epoch) + ".bin"), meta.dump());
      std::ofstream js(ckpt_dir / (std::to_string(epoch) + ".json"));
      json side = meta;
      side["config"] = json::parse(model_config_to_json(model.config()));
      js << side.dump(2) << "\n";
      write_history_csv(cfg.out_dir / "history.csv", report.history);
    }
    if (validate && cfg.target_val_acc && rec.val_query_acc >= *cfg.target_val_acc) break;
  }
  load_into(store, best);
  return report;
}

// ---- gradient checks ----------------------------------------------------

namespace {

constexpr const char* kToySchema = R"({"databases": [{
  "db_id": "toy",
  "tables": [
    {"name": "singer", "columns": [{"name": "singer_id", "type": "number"}, {"name": "name", "type": "text"},
                                   {"name": "age", "type": "number"}]},
    {"name": "concert", "columns": [{"name": "concert_id", "type": "number"}, {"name": "singer_id", "type": "number"},
                                    {"name": "year", "type": "number"}]}],
  "primary_keys": [["singer", "singer_id"], ["concert", "concert_id"]],
  "foreign_keys": [["concert", "singer_id", "singer", "singer_id"]],
  "value_pool": ["joe", "1999", "30"]}]})";

ModelConfig toy_model(int d) {
  ModelConfig c;
  c.speech.n_blocks = 2;
  c.speech.channels = 2;
  c.speech.time_stride_blocks = {2};
  c.speech.mel_stride_blocks = {1, 2};
  c.speech.mel_reduce = MelReduce::kFlatten;
  c.speech.d_model = d;
  c.schema.embed_dim = 3;
  c.schema.lstm_hidden = 3;
  c.schema.d_model = d;
  c.fusion.n_layers = 2;
  c.fusion.n_heads = 2;
  c.fusion.d_ff = 6;
  c.fusion.d_model = d;
  c.fusion.dropout = 0.0;
  c.decoder.hidden = d;
  c.decoder.d_action = 3;
  c.decoder.d_type = 3;
  c.input_frames = 8;
  return c;
}

ag::Matrix gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  ag::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

ag::Var probe(const ag::Var& out, const ag::Matrix& weights) { return ag::sum(ag::mul(out, ag::constant(weights))); }

std::vector<ag::Parameter*> with_prefixes(ParamStore& store, std::initializer_list<const char*> prefixes) {
  std::vector<ag::Parameter*> out;
  for (const char* p : prefixes) {
    auto v = store.with_prefix(p);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

Vocabulary toy_vocab(const Schema& schema) {
  Vocabulary v;
  for (const auto& node : build_schema_graph(schema).nodes)
    for (const auto& t : node.tokens) v.add(t);
  for (const char* w : {"show", "the", "age", "of", "joe", "singers"}) v.add(w);
  return v;
}

}  // namespace

const std::vector<std::string>& grad_check_components() {
  static const std::vector<std::string> ids{"speech_encoder", "schema_encoder", "fusion",
                                            "decoder",        "sspt_loss",      "sipt_loss"};
  return ids;
}

GradCheckResult grad_check(const std::string& component, const ToyConfig& toy, double eps) {
  const auto& ids = grad_check_components();
  if (std::find(ids.begin(), ids.end(), component) == ids.end())
    throw Error(ErrorCode::kUnknownComponent, "unknown component '" + component + "'");
  const SchemaStore schemas = parse_schema_store(kToySchema);
  const Schema& schema = schemas.at("toy");
  const ModelConfig cfg = toy_model(toy.d_model);
  const Vocabulary vocab = toy_vocab(schema);
  std::mt19937_64 rng(toy.seed);
  ParamStore store;
  const int d = toy.d_model;

  if (component == "speech_encoder") {
    init_speech_encoder(store, cfg.speech, rng);
    const ag::Matrix a = gaussian(cfg.input_frames, kMelBands, rng), b = gaussian(cfg.input_frames, kMelBands, rng);
    const ag::Matrix w = gaussian(2 * cfg.speech.output_frames(cfg.input_frames), d, rng);
    return check_gradients(store.with_prefix("speech."), [&](ag::Context& ctx) {
      return probe(encode_speech_batch(ctx, store, cfg.speech, {&a, &b}), w);
    }, true, eps);
  }
  if (component == "schema_encoder") {
    init_schema_encoder(store, cfg.schema, vocab.size(), rng);
    for (auto* p : store.with_prefix("")) p->value += gaussian(p->value.rows(), p->value.cols(), rng, 0.1);
    const SchemaGraph g = build_schema_graph(schema);
    const ag::Matrix w = gaussian(g.n_nodes(), d, rng);
    return check_gradients(with_prefixes(store, {"text.", "schema.gcn."}), [&](ag::Context& ctx) {
      return probe(encode_graph(ctx, store, cfg.schema, embed_nodes(ctx, store, cfg.schema, vocab, g), g), w);
    }, false, eps);
  }
  if (component == "fusion") {
    init_fusion(store, cfg.fusion, rng);
    for (auto* p : store.with_prefix("")) p->value += gaussian(p->value.rows(), p->value.cols(), rng, 0.1);
    const ag::Matrix za = gaussian(5, d, rng), zs = gaussian(3, d, rng);
    const ag::Matrix wa = gaussian(5, d, rng), ws = gaussian(3, d, rng);
    const std::vector<bool> valid{true, true, true, true, false};
    return check_gradients(store.with_prefix("fusion."), [&](ag::Context& ctx) {
      FusedEmbeddings f = fuse(ctx, store, cfg.fusion, ag::constant(za), ag::constant(zs), valid);
      return ag::add(probe(f.za, wa), probe(f.zs, ws));
    }, false, eps);
  }
  if (component == "decoder") {
    const Grammar& grammar = default_grammar();
    init_decoder(store, cfg.decoder, grammar.n_rules(), rng);
    for (auto* p : store.with_prefix("")) p->value += gaussian(p->value.rows(), p->value.cols(), rng, 0.1);
    const SchemaCatalog catalog(schema);
    const std::vector<std::string> candidates{"joe", "30"};
    const ActionSequence gold =
        sql_to_actions("SELECT max(age) FROM singer WHERE name = 'joe'", schema, grammar, candidates);
    const ag::Matrix za = gaussian(5, d, rng);
    const ag::Matrix zs = gaussian(catalog.n_tables() + catalog.n_columns(), d, rng);
    const ag::Matrix values = gaussian(2, d, rng);
    return check_gradients(store.with_prefix("decoder."), [&](ag::Context& ctx) {
      DecoderInputs in;
      in.za = ag::constant(za);
      in.za_valid = 4;
      in.zs = ag::constant(zs);
      in.values = ag::constant(values);
      in.catalog = &catalog;
      in.n_candidates = 2;
      return teacher_forced_loss(ctx, store, cfg.decoder, grammar, in, gold);
    }, false, eps);
  }

  init_speech_encoder(store, cfg.speech, rng);
  init_schema_encoder(store, cfg.schema, vocab.size(), rng);
  init_pretrain_heads(store, cfg, vocab.size(), 4, rng);
  std::vector<ag::Matrix> feats;
  for (int i = 0; i < 3; ++i) feats.push_back(gaussian(cfg.input_frames, kMelBands, rng));
  if (component == "sspt_loss") {
    PairBatch batch;
    for (const auto& f : feats) batch.speech.push_back(&f);
    batch.transcripts = {vocab.encode({"show", "the", "age"}), vocab.encode({"age", "of", "joe"}),
                         vocab.encode({"singers"})};
    batch.valid_frames = {4, 3, 4};
    return check_gradients(with_prefixes(store, {"speech.", "text.", "sae.", "tae."}), [&](ag::Context& ctx) {
      return sspt_loss(ctx, store, cfg, batch).total;
    }, true, eps);
  }
  std::vector<SpeechFeatures> sf(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) sf[i].data = feats[i];
  const std::vector<SIPTExample> examples{{&sf[0], "age", {"age"}, 1},
                                          {&sf[0], "name", {"name"}, 0},
                                          {&sf[1], "year", {"year"}, 1},
                                          {&sf[2], "singer_id", {"singer", "id"}, 0}};
  return check_gradients(with_prefixes(store, {"speech.", "text.", "sipt."}), [&](ag::Context& ctx) {
    return sipt_loss(ctx, store, cfg, vocab, examples);
  }, true, eps);
}

}  // namespace speechsql
