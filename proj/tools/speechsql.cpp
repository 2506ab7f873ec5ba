// speechsql: data synthesis, pre-training, fine-tuning, evaluation and
// prediction from the command line.

#include "speechsql/dataset.hpp"
#include "speechsql/error.hpp"
#include "speechsql/eval.hpp"
#include "speechsql/model.hpp"
#include "speechsql/pretrain.hpp"
#include "speechsql/sql.hpp"
#include "speechsql/train.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace speechsql;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

std::uint64_t resolve_seed(const Common& c) {
  if (c.seed_given) return c.seed;
  if (const char* env = std::getenv("SPEECHSQL_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (!*env || *end) throw UsageError("SPEECHSQL_SEED must be an unsigned integer, got '" + std::string(env) + "'");
    return v;
  }
  return 0;
}

void write_run_config(const CLI::App& sub, const Common& c, std::uint64_t seed) {
  json opts = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    const std::string name = o->get_name(false, true);
    if (name.empty() || name == "--help" || name == "-h") continue;
    std::string key = o->get_lnames().empty() ? name : o->get_lnames().front();
    if (key == "help") continue;
    if (o->count() == 0) {
      opts[key] = o->get_default_str();
    } else if (o->get_expected_max() == 0) {
      opts[key] = true;
    } else {
      const auto r = o->results();
      opts[key] = r.size() == 1 ? json(r.front()) : json(r);
    }
  }
  json j{{"subcommand", sub.get_name()}, {"seed", seed}, {"options", opts}};
  fs::create_directories(c.out);
  std::ofstream os(fs::path(c.out) / "run_config.json");
  os << j.dump(2) << "\n";
}

Grammar read_grammar(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kIo, "cannot read grammar " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return load_grammar(ss.str());
}

ModelConfig model_config(const std::string& preset, int d_model) {
  if (preset == "paper") return ModelConfig::paper();
  if (preset == "desk") return ModelConfig::desk(d_model);
  throw UsageError("--preset must be 'desk' or 'paper'");
}

BuildOptions build_options(const std::string& manifest) {
  BuildOptions o;
  o.base_dir = fs::path(manifest).parent_path();
  return o;
}

void add_common(CLI::App* sub, Common& c, bool out_required) {
  auto* out = sub->add_option("--out", c.out, "Output directory");
  if (out_required)
    out->required();
  else
    out->default_val(".");
  sub->add_option_function<std::uint64_t>("--seed", [&c](const std::uint64_t& v) {
    c.seed = v;
    c.seed_given = true;
  }, "Random seed (falls back to SPEECHSQL_SEED)");
}

// ---- subcommands --------------------------------------------------------

struct SynthArgs {
  std::string schemas;
  int n = 200;
  int n_test = 0;
};

int run_synth(const SynthArgs& a, const Common& c, std::uint64_t seed) {
  const SchemaStore store = load_schema_store(a.schemas);
  SynthOptions opts;
  opts.seed = seed;
  std::vector<ManifestRecord> train, test;
  if (a.n_test > 0) {
    SynthSplit split = synth_split(store, a.n, a.n_test, opts);
    train = std::move(split.train);
    test = std::move(split.test);
  } else {
    train = synth_records(store, a.n, opts);
  }
  const fs::path out(c.out);
  fs::create_directories(out / "features");
  PseudoTTSConfig tts;
  auto materialize = [&](std::vector<ManifestRecord>& records) {
    for (auto& r : records) {
      const std::string rel = "features/" + r.id + ".sqlf";
      write_feature_file(out / rel, synth_pseudo_speech(*r.transcript, tts));
      r.audio = rel;
    }
  };
  materialize(train);
  write_manifest(out / "train.jsonl", train);
  if (!test.empty()) {
    materialize(test);
    write_manifest(out / "test.jsonl", test);
  }
  std::printf("wrote %zu train and %zu test records to %s\n", train.size(), test.size(), c.out.c_str());
  return 0;
}

struct PretrainArgs {
  std::string schemas, manifest, preset = "desk", resume, init;
  int d_model = 128, epochs = 50, batch_size = 4, stop_after = -1, n_negatives = 3;
  double lr = 1e-3;
};

int run_pretrain(const PretrainArgs& a, const Common& c, std::uint64_t seed, bool sspt) {
  const SchemaStore store = load_schema_store(a.schemas);
  const auto records = read_manifest(a.manifest);
  const auto instances = build_instances(records, store, default_grammar(), build_options(a.manifest));
  PretrainConfig pc;
  pc.model = model_config(a.preset, a.d_model);
  pc.sspt = sspt;
  pc.sipt = !sspt;
  pc.epochs = a.epochs;
  pc.batch_size = a.batch_size;
  pc.lr = a.lr;
  pc.seed = seed;
  pc.n_negatives = a.n_negatives;
  pc.out_dir = c.out;
  pc.resume = a.resume;
  pc.stop_after_epoch = a.stop_after;
  Vocabulary vocab = build_vocabulary(store, instances);
  if (!a.init.empty()) {
    PretrainResult prev = read_pretrained(a.init);
    pc.init_weights = prev.weights;
    if (!prev.vocabulary.empty()) {
      vocab = Vocabulary();
      for (const auto& w : prev.vocabulary) vocab.add(w);
    }
  }
  PretrainResult r = run_pretraining(instances, store, vocab, pc);
  write_pretrained(fs::path(c.out) / "pretrained.bin", r);
  std::ofstream csv(fs::path(c.out) / "pretrain_history.csv");
  csv << "epoch,la,ls,lp,sipt,seconds\n";
  for (const auto& h : r.history)
    csv << h.epoch << ',' << h.la << ',' << h.ls << ',' << h.lp << ',' << h.sipt << ',' << h.seconds << "\n";
  if (!r.history.empty()) {
    const auto& h = r.history.back();
    std::printf("epoch %d la %.4f ls %.4f lp %.4f sipt %.4f\n", h.epoch, h.la, h.ls, h.lp, h.sipt);
  }
  return 0;
}

struct TrainArgs {
  std::string schemas, manifest, val_manifest, grammar, preset = "desk", pretrained, gcn_ablation = "identity";
  int d_model = 128, epochs = 30, batch_size = 16, validate_every = 1, pretrain_epochs = 0;
  double lr = 1e-3, lr_decay = 0.8, target_acc = -1.0, dropout = -1.0;
  bool no_gcn = false, no_linking = false, no_fusion = false, no_sspt = false, no_sipt = false, freeze_text = false;
};

int run_train(const TrainArgs& a, const Common& c, std::uint64_t seed) {
  const SchemaStore store = load_schema_store(a.schemas);
  const Grammar grammar = read_grammar(a.grammar);
  const auto train = build_instances(read_manifest(a.manifest), store, grammar, build_options(a.manifest));
  const std::string val_path = a.val_manifest.empty() ? a.manifest : a.val_manifest;
  const auto val = build_instances(read_manifest(val_path), store, grammar, build_options(val_path));

  ModelConfig mc = model_config(a.preset, a.d_model);
  mc.schema.use_gcn = !a.no_gcn;
  mc.schema.ablation = a.gcn_ablation == "rnn" ? GraphAblation::kRnn : GraphAblation::kIdentity;
  mc.no_linking = a.no_linking;
  mc.no_fusion = a.no_fusion;
  if (a.dropout >= 0.0) mc.fusion.dropout = a.dropout;

  const bool use_pretraining = !(a.no_sspt && a.no_sipt);
  Vocabulary vocab = build_vocabulary(store, train);
  std::vector<NamedTensor> pretrained;
  if (use_pretraining && !a.pretrained.empty()) {
    PretrainResult r = read_pretrained(a.pretrained);
    if (!r.vocabulary.empty()) {
      vocab = Vocabulary();
      for (const auto& w : r.vocabulary) vocab.add(w);
    }
    pretrained = std::move(r.weights);
  } else if (use_pretraining && a.pretrain_epochs > 0) {
    PretrainConfig pc;
    pc.model = mc;
    pc.sspt = !a.no_sspt;
    pc.sipt = !a.no_sipt;
    pc.epochs = a.pretrain_epochs;
    pc.seed = seed;
    pretrained = run_pretraining(train, store, vocab, pc).weights;
  }
  Model model(mc, grammar, vocab, store, seed);
  if (!pretrained.empty()) apply_pretrained(model, pretrained);

  TrainConfig tc = TrainConfig::desk();
  tc.lr = a.lr;
  tc.lr_decay = a.lr_decay;
  tc.batch_size = a.batch_size;
  tc.max_epochs = a.epochs;
  tc.seed = seed;
  tc.no_sspt = a.no_sspt;
  tc.no_sipt = a.no_sipt;
  tc.freeze_text_encoder = a.freeze_text;
  tc.validate_every = a.validate_every;
  if (a.target_acc >= 0.0) tc.target_val_acc = a.target_acc;
  tc.out_dir = c.out;
  tc.verbose = true;
  const TrainReport rep = train_loop(model, train, val, tc);
  model.save(fs::path(c.out) / "best.bin", json{{"epoch", rep.best_epoch}, {"val_query_acc", rep.best_val_acc}}.dump());
  std::printf("best epoch %d val_query_acc %.4f\n", rep.best_epoch, rep.best_val_acc);
  return 0;
}

struct EvalArgs {
  std::string ckpt, manifest, schemas;
  double inject_wer = -1.0;
};

int run_eval(const EvalArgs& a, const Common& c, std::uint64_t seed) {
  const SchemaStore store = load_schema_store(a.schemas);
  const auto records = read_manifest(a.manifest);
  EvalReport r;
  if (a.inject_wer < 0.0) {
    r = evaluate_checkpoint(a.ckpt, records, store, build_options(a.manifest), c.out);
  } else {
    if (a.inject_wer > 1.0) throw UsageError("--inject-wer must lie in [0, 1]");
    std::unique_ptr<Model> model;
    try {
      model = load_model(a.ckpt, store);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kIo || e.code() == ErrorCode::kCheckpointMismatch) throw;
      throw Error(ErrorCode::kCheckpointMismatch, e.what());
    }
    auto instances = build_instances(records, store, model->grammar(), build_options(a.manifest));
    const double achieved = degrade_transcripts(instances, a.inject_wer, seed);
    std::printf("injected mean WER %.4f\n", achieved);
    r = evaluate(*model, instances, c.out);
  }
  std::printf("query_acc %.4f over %d queries, TPQ %.4fs\n", r.query_acc, r.n, r.tpq_seconds);
  return 0;
}

struct PredictArgs {
  std::string ckpt, schemas, db_id, audio;
};

int run_predict(const PredictArgs& a) {
  const SchemaStore store = load_schema_store(a.schemas);
  auto model = load_model(a.ckpt, store);
  Instance inst;
  inst.id = "predict";
  inst.db_id = a.db_id;
  const Schema& schema = model->schema(a.db_id);
  BuildOptions opts;
  inst.features = load_audio(a.audio, opts);
  std::set<std::string> seen;
  for (const auto& v : schema.value_pool)
    if (seen.insert(normalize_literal(v)).second) inst.candidate_values.push_back(v);
  const ActionSequence actions = model->predict_actions(inst);
  std::printf("%s\n", actions_to_sql(actions, schema, model->grammar(), inst.candidate_values).c_str());
  return 0;
}

struct GradArgs {
  std::string component = "all";
  double eps = 1e-5;
  int d_model = 4;
};

int run_gradcheck(const GradArgs& a, const Common& c, std::uint64_t seed) {
  std::vector<std::string> ids;
  if (a.component == "all")
    ids = grad_check_components();
  else
    ids.push_back(a.component);
  json results = json::object();
  bool ok = true;
  for (const auto& id : ids) {
    const GradCheckResult r = grad_check(id, ToyConfig{a.d_model, seed ? seed : 7}, a.eps);
    std::printf("%-15s max_rel_err %.3e (%s, %zu entries)\n", id.c_str(), r.max_rel_error, r.worst_parameter.c_str(),
                r.entries_checked);
    results[id] = {{"max_rel_error", r.max_rel_error}, {"worst_parameter", r.worst_parameter}};
    ok = ok && r.max_rel_error < 1e-4;
  }
  std::ofstream(fs::path(c.out) / "gradcheck.json") << results.dump(2) << "\n";
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-to-SQL parsing toolkit"};
  app.require_subcommand(1);
  Common common;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "Generate a synthetic pseudo-speech corpus");
  add_common(s, common, true);
  s->add_option("--schemas", synth.schemas, "Schema store JSON")->required()->check(CLI::ExistingFile);
  s->add_option("--n", synth.n, "Number of training records")->check(CLI::PositiveNumber);
  s->add_option("--n-test", synth.n_test, "Held-out records (disjoint question/schema pairs)")->check(CLI::NonNegativeNumber);

  PretrainArgs pss, psi;
  auto add_pretrain = [&](CLI::App* p, PretrainArgs& a) {
    add_common(p, common, true);
    p->add_option("--schemas", a.schemas, "Schema store JSON")->required()->check(CLI::ExistingFile);
    p->add_option("--manifest", a.manifest, "Training manifest (JSON lines)")->required()->check(CLI::ExistingFile);
    p->add_option("--preset", a.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    p->add_option("--d-model", a.d_model, "Model width for the desk preset")->check(CLI::PositiveNumber);
    p->add_option("--epochs", a.epochs, "Epochs")->check(CLI::PositiveNumber);
    p->add_option("--batch-size", a.batch_size, "Pairs per batch")->check(CLI::Range(2, 1 << 20));
    p->add_option("--lr", a.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    p->add_option("--resume", a.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    p->add_option("--init", a.init, "Pre-trained weights to start from")->check(CLI::ExistingFile);
    p->add_option("--stop-after", a.stop_after, "Stop after this epoch");
  };
  auto* ss = app.add_subcommand("pretrain-ss", "Speech-sentence pre-training");
  add_pretrain(ss, pss);
  auto* si = app.add_subcommand("pretrain-si", "Speech-item pre-training");
  add_pretrain(si, psi);
  si->add_option("--negatives", psi.n_negatives, "Negative columns per instance")->check(CLI::NonNegativeNumber);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Fine-tune the full model");
  add_common(t, common, true);
  t->add_option("--schemas", tr.schemas, "Schema store JSON")->required()->check(CLI::ExistingFile);
  t->add_option("--manifest", tr.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--val-manifest", tr.val_manifest, "Validation manifest (default: training set)")->check(CLI::ExistingFile);
  t->add_option("--grammar", tr.grammar, "SemQL grammar file")->required()->check(CLI::ExistingFile);
  t->add_option("--preset", tr.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  t->add_option("--d-model", tr.d_model, "Model width for the desk preset")->check(CLI::PositiveNumber);
  t->add_option("--epochs", tr.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  t->add_option("--batch-size", tr.batch_size, "Instances per batch")->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  t->add_option("--lr-decay", tr.lr_decay, "Plateau decay factor")->check(CLI::Range(0.0, 1.0));
  t->add_option("--dropout", tr.dropout, "Fusion dropout override")->check(CLI::Range(0.0, 1.0));
  t->add_option("--validate-every", tr.validate_every, "Validate every k epochs")->check(CLI::PositiveNumber);
  t->add_option("--target-acc", tr.target_acc, "Stop at this validation accuracy")->check(CLI::Range(0.0, 1.0));
  t->add_option("--pretrained", tr.pretrained, "Weights from pretrain-ss / pretrain-si")->check(CLI::ExistingFile);
  t->add_option("--pretrain-epochs", tr.pretrain_epochs, "Run pre-training in-process first")->check(CLI::NonNegativeNumber);
  t->add_flag("--no-gcn", tr.no_gcn, "Replace the GCN (see --gcn-ablation)");
  t->add_option("--gcn-ablation", tr.gcn_ablation, "Stand-in used with --no-gcn: identity or rnn")
      ->check(CLI::IsMember({"identity", "rnn"}));
  t->add_flag("--no-linking", tr.no_linking, "Skip cosine schema linking");
  t->add_flag("--no-fusion", tr.no_fusion, "Skip the co-attention encoder");
  t->add_flag("--no-sspt", tr.no_sspt, "Disable speech-sentence pre-training");
  t->add_flag("--no-sipt", tr.no_sipt, "Disable speech-item pre-training");
  t->add_flag("--freeze-text", tr.freeze_text, "Keep the text encoder fixed");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(e, common, true);
  e->add_option("--ckpt", ev.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--manifest", ev.manifest, "Evaluation manifest")->required()->check(CLI::ExistingFile);
  e->add_option("--schemas", ev.schemas, "Schema store JSON")->default_val("data/schemas.json")->check(CLI::ExistingFile);
  e->add_option("--inject-wer", ev.inject_wer, "Noise transcripts to this WER and re-synthesize speech");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Decode one utterance");
  add_common(p, common, false);
  p->add_option("--ckpt", pr.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  p->add_option("--schemas", pr.schemas, "Schema store JSON")->default_val("data/schemas.json")->check(CLI::ExistingFile);
  p->add_option("--db-id", pr.db_id, "Database id")->required();
  p->add_option("--audio", pr.audio, "WAV/.sqlf path or pseudo:<tokens>")->required();

  GradArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(g, common, false);
  std::vector<std::string> comps = grad_check_components();
  comps.push_back("all");
  g->add_option("--component", gc.component, "Component id or 'all'")->check(CLI::IsMember(comps));
  g->add_option("--eps", gc.eps, "Finite-difference step")->check(CLI::PositiveNumber);
  g->add_option("--d-model", gc.d_model, "Toy width")->check(CLI::Range(2, 64));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 1;
  }

  try {
    const std::uint64_t seed = resolve_seed(common);
    CLI::App* sub = app.get_subcommands().front();
    write_run_config(*sub, common, seed);
    if (sub == s) return run_synth(synth, common, seed);
    if (sub == ss) return run_pretrain(pss, common, seed, true);
    if (sub == si) return run_pretrain(psi, common, seed, false);
    if (sub == t) return run_train(tr, common, seed);
    if (sub == e) return run_eval(ev, common, seed);
    if (sub == p) return run_predict(pr);
    if (sub == g) return run_gradcheck(gc, common, seed);
  } catch (const UsageError& ex) {
    std::fprintf(stderr, "usage error: %s\n", ex.what());
    return 1;
  } catch (const Error& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 2;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 2;
  }
  return 1;
}
