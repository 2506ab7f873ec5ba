#include "speechsql/model.hpp"

#include "speechsql/error.hpp"
#include "speechsql/sql.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace speechsql {

using nlohmann::json;

namespace {

std::vector<std::string> nonempty_value_tokens(const std::string& value) {
  auto t = value_tokens(value);
  if (t.empty()) t.push_back("<unk>");
  return t;
}

json speech_json(const SpeechEncoderConfig& c) {
  return {{"n_blocks", c.n_blocks},
          {"channels", c.channels},
          {"time_stride_blocks", c.time_stride_blocks},
          {"mel_stride_blocks", c.mel_stride_blocks},
          {"mel_reduce", c.mel_reduce == MelReduce::kMean ? "mean" : "flatten"},
          {"d_model", c.d_model}};
}

}  // namespace

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk(int d) {
  ModelConfig c;
  c.speech.n_blocks = 4;
  c.speech.channels = 16;
  c.speech.time_stride_blocks = {2, 4};
  c.speech.mel_stride_blocks = {1, 2, 3, 4};
  c.speech.mel_reduce = MelReduce::kFlatten;
  c.speech.d_model = d;
  c.schema.embed_dim = std::max(16, d / 2);
  c.schema.lstm_hidden = std::max(8, d / 2);
  c.schema.d_model = d;
  c.fusion.d_model = d;
  c.fusion.d_ff = 2 * d;
  c.fusion.dropout = 0.1;
  c.decoder.hidden = d;
  return c;
}

void ModelConfig::validate() const {
  const int d = fusion.d_model;
  if (speech.d_model != d || schema.d_model != d || decoder.hidden != d)
    throw Error(ErrorCode::kInvalidArgument, "component d_model values disagree");
  if (d % fusion.n_heads != 0) throw Error(ErrorCode::kInvalidArgument, "d_model must be divisible by n_heads");
  if (input_frames < 1) throw Error(ErrorCode::kInvalidArgument, "input_frames must be positive");
}

std::string model_config_to_json(const ModelConfig& c) {
  json j{{"speech", speech_json(c.speech)},
         {"schema",
          {{"embed_dim", c.schema.embed_dim},
           {"lstm_hidden", c.schema.lstm_hidden},
           {"d_model", c.schema.d_model},
           {"use_gcn", c.schema.use_gcn},
           {"ablation", c.schema.ablation == GraphAblation::kIdentity ? "identity" : "rnn"}}},
         {"fusion",
          {{"n_layers", c.fusion.n_layers},
           {"n_heads", c.fusion.n_heads},
           {"d_ff", c.fusion.d_ff},
           {"d_model", c.fusion.d_model},
           {"dropout", c.fusion.dropout},
           {"use_positional_encoding", c.fusion.use_positional_encoding}}},
         {"decoder",
          {{"hidden", c.decoder.hidden},
           {"d_action", c.decoder.d_action},
           {"d_type", c.decoder.d_type},
           {"max_steps", c.decoder.max_steps}}},
         {"input_frames", c.input_frames},
         {"no_linking", c.no_linking},
         {"no_fusion", c.no_fusion}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    if (j.contains("speech")) {
      const auto& s = j["speech"];
      c.speech.n_blocks = s.value("n_blocks", c.speech.n_blocks);
      c.speech.channels = s.value("channels", c.speech.channels);
      c.speech.time_stride_blocks = s.value("time_stride_blocks", c.speech.time_stride_blocks);
      c.speech.mel_stride_blocks = s.value("mel_stride_blocks", c.speech.mel_stride_blocks);
      c.speech.mel_reduce = s.value("mel_reduce", std::string("mean")) == "flatten" ? MelReduce::kFlatten : MelReduce::kMean;
      c.speech.d_model = s.value("d_model", c.speech.d_model);
    }
    if (j.contains("schema")) {
      const auto& s = j["schema"];
      c.schema.embed_dim = s.value("embed_dim", c.schema.embed_dim);
      c.schema.lstm_hidden = s.value("lstm_hidden", c.schema.lstm_hidden);
      c.schema.d_model = s.value("d_model", c.schema.d_model);
      c.schema.use_gcn = s.value("use_gcn", c.schema.use_gcn);
      c.schema.ablation = s.value("ablation", std::string("identity")) == "rnn" ? GraphAblation::kRnn : GraphAblation::kIdentity;
    }
    if (j.contains("fusion")) {
      const auto& s = j["fusion"];
      c.fusion.n_layers = s.value("n_layers", c.fusion.n_layers);
      c.fusion.n_heads = s.value("n_heads", c.fusion.n_heads);
      c.fusion.d_ff = s.value("d_ff", c.fusion.d_ff);
      c.fusion.d_model = s.value("d_model", c.fusion.d_model);
      c.fusion.dropout = s.value("dropout", c.fusion.dropout);
      c.fusion.use_positional_encoding = s.value("use_positional_encoding", c.fusion.use_positional_encoding);
    }
    if (j.contains("decoder")) {
      const auto& s = j["decoder"];
      c.decoder.hidden = s.value("hidden", c.decoder.hidden);
      c.decoder.d_action = s.value("d_action", c.decoder.d_action);
      c.decoder.d_type = s.value("d_type", c.decoder.d_type);
      c.decoder.max_steps = s.value("max_steps", c.decoder.max_steps);
    }
    c.input_frames = j.value("input_frames", c.input_frames);
    c.no_linking = j.value("no_linking", c.no_linking);
    c.no_fusion = j.value("no_fusion", c.no_fusion);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string grammar_text(const Grammar& grammar) {
  std::string out;
  for (const auto& p : grammar.productions()) out += p.text() + "\n";
  return out;
}

Vocabulary build_vocabulary(const SchemaStore& schemas, const std::vector<Instance>& instances) {
  Vocabulary v;
  for (const auto& [id, schema] : schemas) {
    const SchemaGraph g = build_schema_graph(schema);
    for (const auto& n : g.nodes)
      for (const auto& t : n.tokens) v.add(t);
    for (const auto& value : schema.value_pool)
      for (const auto& t : value_tokens(value)) v.add(t);
  }
  for (const auto& inst : instances) {
    for (const auto& value : inst.candidate_values)
      for (const auto& t : value_tokens(value)) v.add(t);
    if (inst.transcript)
      for (const auto& t : *inst.transcript) v.add(to_lower(t));
  }
  return v;
}

Model::Model(ModelConfig cfg, Grammar grammar, Vocabulary vocab, SchemaStore schemas, std::uint64_t seed)
    : cfg_(std::move(cfg)), grammar_(std::move(grammar)), vocab_(std::move(vocab)), schemas_(std::move(schemas)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  init_speech_encoder(store_, cfg_.speech, rng);
  init_schema_encoder(store_, cfg_.schema, vocab_.size(), rng);
  init_fusion(store_, cfg_.fusion, rng);
  init_decoder(store_, cfg_.decoder, grammar_.n_rules(), rng);
}

const Schema& Model::schema(const std::string& db_id) const {
  auto it = schemas_.find(db_id);
  if (it == schemas_.end()) throw Error(ErrorCode::kInvalidArgument, "unknown db_id '" + db_id + "'");
  return it->second;
}

const SchemaCatalog& Model::catalog(const std::string& db_id) const {
  auto it = cache_.find(db_id);
  if (it != cache_.end()) return it->second->catalog;
  const Schema& s = schema(db_id);
  auto entry = std::make_unique<SchemaCache>(SchemaCache{SchemaCatalog(s), build_schema_graph(s)});
  const SchemaCatalog& ref = entry->catalog;
  const_cast<Model*>(this)->cache_.emplace(db_id, std::move(entry));
  return ref;
}

const SchemaGraph& Model::graph(const std::string& db_id) const {
  catalog(db_id);
  return cache_.at(db_id)->graph;
}

std::vector<EncodedInstance> Model::encode(ag::Context& ctx, const std::vector<const Instance*>& batch,
                                           EncodeTrace* trace) {
  if (batch.empty()) return {};
  const int frames = cfg_.input_frames;
  std::vector<ag::Matrix> padded;
  padded.reserve(batch.size());
  for (const Instance* inst : batch) padded.push_back(pad_or_resample(inst->features, frames).data);
  std::vector<const ag::Matrix*> ptrs;
  for (const auto& m : padded) ptrs.push_back(&m);
  ag::Var speech = encode_speech_batch(ctx, store_, cfg_.speech, ptrs);
  const int l_out = cfg_.speech.output_frames(frames);

  std::map<std::string, ag::Var> zs_by_db;
  for (const Instance* inst : batch) {
    if (zs_by_db.count(inst->db_id)) continue;
    const SchemaGraph& g = graph(inst->db_id);
    ag::Var h = embed_nodes(ctx, store_, cfg_.schema, vocab_, g);
    zs_by_db.emplace(inst->db_id, encode_graph(ctx, store_, cfg_.schema, h, g));
  }

  std::vector<std::vector<int>> value_ids;
  for (const Instance* inst : batch)
    for (const auto& v : inst->candidate_values) value_ids.push_back(vocab_.encode(nonempty_value_tokens(v)));
  ag::Var values;
  if (!value_ids.empty()) values = encode_token_lists(ctx, store_, cfg_.schema, value_ids).pooled;

  if (trace) trace->fusion.clear();
  std::vector<EncodedInstance> out;
  out.reserve(batch.size());
  int value_row = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Instance& inst = *batch[i];
    EncodedInstance e;
    e.za_raw = ag::slice_rows(speech, static_cast<Eigen::Index>(i) * l_out, l_out);
    e.zs_raw = zs_by_db.at(inst.db_id);
    const int valid = std::min(l_out, cfg_.speech.output_frames(std::min<int>(frames, static_cast<int>(inst.features.frames()))));
    ag::Var za = e.za_raw;
    if (!cfg_.no_linking) {
      e.link = link_scores(za, e.zs_raw);
      za = apply_linking(za, e.zs_raw, e.link);
    }
    ag::Var zs = e.zs_raw;
    if (!cfg_.no_fusion) {
      std::vector<bool> mask(static_cast<std::size_t>(l_out), false);
      for (int r = 0; r < valid; ++r) mask[static_cast<std::size_t>(r)] = true;
      FusionTrace ft;
      FusedEmbeddings f = fuse(ctx, store_, cfg_.fusion, za, zs, mask, trace ? &ft : nullptr);
      za = f.za;
      zs = f.zs;
      if (trace) trace->fusion.push_back(std::move(ft));
    }
    e.inputs.za = za;
    e.inputs.za_valid = valid;
    e.inputs.zs = zs;
    e.inputs.catalog = &catalog(inst.db_id);
    e.inputs.n_candidates = static_cast<int>(inst.candidate_values.size());
    if (e.inputs.n_candidates > 0) e.inputs.values = ag::slice_rows(values, value_row, e.inputs.n_candidates);
    value_row += e.inputs.n_candidates;
    out.push_back(std::move(e));
  }
  return out;
}

ag::Var Model::batch_loss(ag::Context& ctx, const std::vector<const Instance*>& batch) {
  auto enc = encode(ctx, batch);
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    try {
      terms.push_back(teacher_forced_loss(ctx, store_, cfg_.decoder, grammar_, enc[i].inputs, batch[i]->gold_actions));
    } catch (const Error& e) {
      throw Error(e.code(), batch[i]->id + ": " + e.what());
    }
  }
  return ag::sum(ag::hcat(terms));
}

ActionSequence Model::predict_actions(const Instance& inst) {
  ag::Context ctx(false, 0, false);
  auto enc = encode(ctx, {&inst});
  return decode(store_, cfg_.decoder, grammar_, enc[0].inputs);
}

std::string Model::predict_sql(const Instance& inst) {
  try {
    const ActionSequence a = predict_actions(inst);
    return actions_to_sql(a, schema(inst.db_id), grammar_, inst.candidate_values);
  } catch (const Error&) {
    return {};
  }
}

void Model::save(const std::filesystem::path& path, const std::string& extra_json) const {
  json header{{"format", "speechsql-model"},
              {"config", json::parse(model_config_to_json(cfg_))},
              {"vocabulary", vocab_.words()},
              {"grammar", grammar_text(grammar_)},
              {"extra", json::parse(extra_json)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  write_tensors(os, header.dump(), snapshot(store_));
}

namespace {

json read_header(const std::filesystem::path& path, std::vector<NamedTensor>* tensors) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::string header;
  auto t = read_tensors(is, &header);
  if (tensors) *tensors = std::move(t);
  try {
    json j = json::parse(header);
    if (j.value("format", std::string()) != "speechsql-model")
      throw Error(ErrorCode::kCheckpointMismatch, path.string() + " is not a model checkpoint");
    return j;
  } catch (const json::exception&) {
    throw Error(ErrorCode::kCheckpointMismatch, path.string() + " has an unreadable header");
  }
}

}  // namespace

std::string Model::load_weights(const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  const json h = read_header(path, &tensors);
  if (h.at("config").dump() != json::parse(model_config_to_json(cfg_)).dump())
    throw Error(ErrorCode::kCheckpointMismatch, "configuration differs from " + path.string());
  if (h.at("vocabulary").get<std::vector<std::string>>() != vocab_.words())
    throw Error(ErrorCode::kCheckpointMismatch, "vocabulary differs from " + path.string());
  if (h.at("grammar").get<std::string>() != grammar_text(grammar_))
    throw Error(ErrorCode::kCheckpointMismatch, "grammar differs from " + path.string());
  const LoadReport r = load_into(store_, tensors);
  if (!r.missing.empty() || !r.unexpected.empty() || !r.shape_mismatch.empty())
    throw Error(ErrorCode::kCheckpointMismatch, "parameter set differs from " + path.string());
  return h.at("extra").dump();
}

std::unique_ptr<Model> load_model(const std::filesystem::path& path, const SchemaStore& schemas,
                                  std::string* extra_json) {
  const json h = read_header(path, nullptr);
  Vocabulary vocab;
  for (const auto& w : h.at("vocabulary").get<std::vector<std::string>>()) vocab.add(w);
  auto model = std::make_unique<Model>(model_config_from_json(h.at("config").dump()),
                                       load_grammar(h.at("grammar").get<std::string>()), std::move(vocab), schemas, 0);
  const std::string extra = model->load_weights(path);
  if (extra_json) *extra_json = extra;
  return model;
}

}  // namespace speechsql
