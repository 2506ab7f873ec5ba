#include "speechsql/error.hpp"
#include "speechsql/eval.hpp"
#include "speechsql/model.hpp"
#include "speechsql/sql.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

#include "json.hpp"

namespace speechsql {

using nlohmann::json;

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string parts_text(const MatchParts& p) {
  std::string s;
  s += p.select_columns ? "select=1" : "select=0";
  s += p.aggregators ? ";agg=1" : ";agg=0";
  s += p.conditions ? ";cond=1" : ";cond=0";
  s += p.structure ? ";struct=1" : ";struct=0";
  return s;
}

}  // namespace

std::string eval_report_json(const EvalReport& r) {
  json j{{"n", r.n},
         {"query_acc", r.query_acc},
         {"select_acc", r.select_acc},
         {"aggregator_acc", r.aggregator_acc},
         {"condition_acc", r.condition_acc},
         {"structure_acc", r.structure_acc},
         {"tpq", {{"mean_seconds", r.tpq_seconds}, {"n_queries", r.n}}}};
  return j.dump(2);
}

EvalReport evaluate(const std::vector<Instance>& instances, const SchemaStore& schemas, const SqlPredictor& predict,
                    const std::filesystem::path& out_dir) {
  if (instances.empty()) throw Error(ErrorCode::kEmptyInput, "evaluation set is empty");
  EvalReport r;
  r.n = static_cast<int>(instances.size());
  for (const auto& inst : instances) {
    auto it = schemas.find(inst.db_id);
    if (it == schemas.end()) throw Error(ErrorCode::kInvalidArgument, "unknown db_id '" + inst.db_id + "'");
    EvalDetail d;
    d.id = inst.id;
    d.gold_sql = inst.gold_sql;
    const auto t0 = std::chrono::steady_clock::now();
    d.pred_sql = predict(inst);
    d.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    d.match = query_match(d.pred_sql, d.gold_sql, it->second);
    r.query_acc += d.match.exact;
    r.select_acc += d.match.parts.select_columns;
    r.aggregator_acc += d.match.parts.aggregators;
    r.condition_acc += d.match.parts.conditions;
    r.structure_acc += d.match.parts.structure;
    r.tpq_seconds += d.seconds;
    r.details.push_back(std::move(d));
  }
  for (double* v : {&r.query_acc, &r.select_acc, &r.aggregator_acc, &r.condition_acc, &r.structure_acc, &r.tpq_seconds})
    *v /= r.n;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream js(out_dir / "eval_report.json");
    if (!js) throw Error(ErrorCode::kIo, "cannot write " + (out_dir / "eval_report.json").string());
    js << eval_report_json(r) << "\n";
    std::ofstream csv(out_dir / "eval_details.csv");
    csv << "id,pred_sql,gold_sql,exact,parts,seconds\n";
    char secs[32];
    for (const auto& d : r.details) {
      std::snprintf(secs, sizeof secs, "%.6f", d.seconds);
      csv << csv_field(d.id) << ',' << csv_field(d.pred_sql) << ',' << csv_field(d.gold_sql) << ','
          << (d.match.exact ? 1 : 0) << ',' << parts_text(d.match.parts) << ',' << secs << "\n";
    }
  }
  return r;
}

EvalReport evaluate(Model& model, const std::vector<Instance>& instances, const std::filesystem::path& out_dir) {
  return evaluate(instances, model.schemas(), [&](const Instance& inst) { return model.predict_sql(inst); }, out_dir);
}

EvalReport evaluate_checkpoint(const std::filesystem::path& ckpt, const std::vector<ManifestRecord>& records,
                               const SchemaStore& schemas, const BuildOptions& opts,
                               const std::filesystem::path& out_dir) {
  std::unique_ptr<Model> model;
  try {
    model = load_model(ckpt, schemas);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo || e.code() == ErrorCode::kCheckpointMismatch) throw;
    throw Error(ErrorCode::kCheckpointMismatch, e.what());
  }
  for (const auto& rec : records)
    if (!schemas.count(rec.db_id))
      throw Error(ErrorCode::kCheckpointMismatch, "record " + rec.id + " names unknown database '" + rec.db_id + "'");
  const auto instances = build_instances(records, schemas, model->grammar(), opts);
  return evaluate(*model, instances, out_dir);
}

double degrade_transcripts(std::vector<Instance>& instances, double target_wer, std::uint64_t seed,
                           const PseudoTTSConfig& tts) {
  std::set<std::string> words;
  for (const auto& inst : instances)
    if (inst.transcript) words.insert(inst.transcript->begin(), inst.transcript->end());
  NoiseSpec spec;
  spec.target_wer = target_wer;
  spec.vocabulary.assign(words.begin(), words.end());
  double total = 0.0;
  int counted = 0;
  for (auto& inst : instances) {
    if (!inst.transcript) throw Error(ErrorCode::kMissingTranscripts, "instance " + inst.id + " has no transcript");
    spec.seed = seed ^ fnv1a64(inst.id);
    auto noisy = inject_asr_noise(*inst.transcript, spec);
    total += wer(*inst.transcript, noisy).wer;
    ++counted;
    if (noisy.empty()) noisy.push_back("<unk>");
    inst.features = synth_pseudo_speech(noisy, tts);
    inst.transcript = std::move(noisy);
  }
  return counted ? total / counted : 0.0;
}

}  // namespace speechsql
