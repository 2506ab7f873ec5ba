#include "speechsql/pretrain.hpp"

#include "speechsql/error.hpp"
#include "speechsql/sql.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "json.hpp"

namespace speechsql {

using nlohmann::json;

namespace {

std::string block(const char* kind, int b) { return std::string("sae.") + kind + std::to_string(b); }

bool pretrained_name(const std::string& name) {
  return name.rfind("speech.", 0) == 0 || name.rfind("text.", 0) == 0;
}

int valid_output_frames(const ModelConfig& cfg, Eigen::Index frames) {
  const int in = std::min<int>(cfg.input_frames, static_cast<int>(frames));
  return std::max(1, std::min(cfg.speech.output_frames(cfg.input_frames), cfg.speech.output_frames(in)));
}

}  // namespace

void init_pretrain_heads(ParamStore& store, const ModelConfig& cfg, int vocab_size, int sipt_bins,
                         std::mt19937_64& rng) {
  const auto& sc = cfg.speech;
  const int c = sc.channels;
  const int d = sc.d_model;
  store.create("sae.proj.w", init::xavier(d, static_cast<Eigen::Index>(c) * sc.output_mel(), rng));
  store.create("sae.proj.b", init::zeros(1, static_cast<Eigen::Index>(c) * sc.output_mel()));
  for (int b = 0; b < sc.n_blocks; ++b) {
    const int c_out = b == 0 ? 1 : c;
    const double bound = std::sqrt(6.0 / (c * 9.0 + c_out * 9.0));
    store.create(block("deconv", b) + ".w", init::uniform(c, c_out * 9, bound, rng));
    store.create(block("deconv", b) + ".b", init::zeros(c_out, 1));
  }
  const int hid = cfg.schema.lstm_hidden;
  const double lb = 1.0 / std::sqrt(static_cast<double>(hid));
  store.create("tae.init.w", init::xavier(d, hid, rng));
  store.create("tae.init.b", init::zeros(1, hid));
  store.create("tae.lstm.wx", init::uniform(cfg.schema.embed_dim, 4 * hid, lb, rng));
  store.create("tae.lstm.wh", init::uniform(hid, 4 * hid, lb, rng));
  ag::Matrix bias = ag::Matrix::Zero(1, 4 * hid);
  bias.middleCols(hid, hid).setOnes();
  store.create("tae.lstm.b", std::move(bias));
  store.create("tae.out.w", init::xavier(hid, vocab_size, rng));
  store.create("tae.out.b", init::zeros(1, vocab_size));
  store.create("sipt.w", init::uniform(sipt_bins, 1, 1.0 / std::sqrt(static_cast<double>(sipt_bins)), rng));
  store.create("sipt.b", init::zeros(1, 1));
}

ag::Var kl_rows(const ag::Matrix& target, const ag::Var& logits) {
  if (target.rows() != logits.rows() || target.cols() != logits.cols())
    throw Error(ErrorCode::kShapeMismatch, "kl_rows: target and reconstruction shapes differ");
  ag::Matrix logp(target.rows(), target.cols());
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    const double m = target.row(r).maxCoeff();
    const double lse = m + std::log((target.row(r).array() - m).exp().sum());
    logp.row(r) = target.row(r).array() - lse;
  }
  ag::Matrix p = logp.array().exp().matrix();
  ag::Var logq = ag::log_softmax_rows(logits);
  ag::Var kl = ag::sum(ag::mul(ag::constant(std::move(p)), ag::sub(ag::constant(std::move(logp)), logq)));
  return ag::scale(kl, 1.0 / static_cast<double>(target.rows()));
}

ag::Var contrastive_loss(const ag::Var& ha, const ag::Var& hs) {
  const Eigen::Index n = ha.rows();
  if (n < 2 || hs.rows() != n) throw Error(ErrorCode::kBatchTooSmall, "contrastive term needs at least two pairs");
  ag::Var sim = ag::matmul_nt(ag::normalize_rows(ha), ag::normalize_rows(hs));
  ag::Matrix off = ag::Matrix::Ones(n, n);
  off.diagonal().setZero();
  ag::Var lse = ag::log(ag::sum_cols(ag::mul(ag::exp(sim), ag::constant(std::move(off)))));
  std::vector<int> diag;
  for (Eigen::Index b = 0; b < n; ++b) diag.push_back(static_cast<int>(b * n + b));
  ag::Var pos = ag::gather_elements(sim, std::move(diag), n, 1);
  return ag::mean(ag::sub(lse, pos));
}

SSPTLoss sspt_loss(ag::Context& ctx, ParamStore& store, const ModelConfig& cfg, const PairBatch& batch) {
  const int n = batch.size();
  if (n < 2 || static_cast<int>(batch.transcripts.size()) != n)
    throw Error(ErrorCode::kBatchTooSmall, "speech-sentence batch needs at least two pairs, got " + std::to_string(n));
  auto P = [&](const std::string& name) { return ctx.param(store.at(name)); };
  const auto& sc = cfg.speech;

  SpeechEncoderTrace trace;
  ag::Var za = encode_speech_batch(ctx, store, sc, batch.speech, &trace);
  const Eigen::Index l = za.rows() / n;

  // Speech autoencoder: mirror of the conv stack back to (frames, 96).
  ag::Var x = ag::linear(za, P("sae.proj.w"), P("sae.proj.b"));
  x = frames_to_maps(x, sc.channels, trace.final_map);
  ag::MapShape shape = trace.final_map;
  for (int b = sc.n_blocks - 1; b >= 0; --b) {
    const ag::MapShape target = trace.block_inputs[static_cast<std::size_t>(b)];
    x = ag::conv_transpose2d(x, shape, P(block("deconv", b) + ".w"), P(block("deconv", b) + ".b"),
                             block_geometry(sc, b), target);
    if (b > 0) x = ag::relu(x);
    shape = target;
  }
  const Eigen::Index frames = batch.speech.front()->rows();
  ag::Var recon = ag::reshape(x, static_cast<Eigen::Index>(n) * frames, kMelBands);
  ag::Matrix target(static_cast<Eigen::Index>(n) * frames, kMelBands);
  for (int b = 0; b < n; ++b) target.middleRows(static_cast<Eigen::Index>(b) * frames, frames) = *batch.speech[b];

  SSPTLoss out;
  out.la = kl_rows(target, recon);

  std::vector<ag::Var> ha_rows;
  for (int b = 0; b < n; ++b) {
    const Eigen::Index valid = batch.valid_frames.empty() ? l : std::min<Eigen::Index>(l, batch.valid_frames[b]);
    ha_rows.push_back(ag::max_rows(ag::slice_rows(za, b * l, l), valid));
  }
  ag::Var ha = ag::vcat(ha_rows);

  // Text autoencoder: BiLSTM states -> mean -> LSTM decoder over tokens.
  TokenEncoding enc = encode_token_lists(ctx, store, cfg.schema, batch.transcripts, true);
  std::vector<ag::Var> hs_rows;
  for (int b = 0; b < n; ++b) hs_rows.push_back(ag::mean_rows(token_ffn(ctx, store, enc.token_states[b])));
  ag::Var hs = ag::vcat(hs_rows);

  const int hid = cfg.schema.lstm_hidden;
  ag::Var h = ag::tanh(ag::linear(hs, P("tae.init.w"), P("tae.init.b")));
  ag::Var c = ag::constant(ag::Matrix::Zero(n, hid));
  ag::Var embed = P("text.embed");
  std::size_t max_len = 0;
  for (const auto& t : batch.transcripts) max_len = std::max(max_len, t.size());
  std::vector<ag::Var> picked;
  for (std::size_t t = 0; t < max_len; ++t) {
    std::vector<int> prev(static_cast<std::size_t>(n), Vocabulary::kBos);
    std::vector<int> idx;
    for (int b = 0; b < n; ++b) {
      const auto& seq = batch.transcripts[b];
      if (t > 0 && t - 1 < seq.size()) prev[b] = seq[t - 1];
      if (t < seq.size()) idx.push_back(static_cast<int>(b * embed.rows() + seq[t]));
    }
    ag::Var hc = ag::lstm_cell(ag::gather_rows(embed, prev), h, c, P("tae.lstm.wx"), P("tae.lstm.wh"), P("tae.lstm.b"));
    h = ag::slice_cols(hc, 0, hid);
    c = ag::slice_cols(hc, hid, hid);
    ag::Var logp = ag::log_softmax_rows(ag::linear(h, P("tae.out.w"), P("tae.out.b")));
    const Eigen::Index k = static_cast<Eigen::Index>(idx.size());
    picked.push_back(ag::gather_elements(logp, std::move(idx), k, 1));
  }
  out.ls = ag::scale(ag::mean(ag::vcat(picked)), -1.0);
  out.lp = contrastive_loss(ha, hs);
  out.total = ag::add(ag::add(out.la, out.ls), out.lp);
  return out;
}

std::vector<SIPTExample> sipt_examples(const Instance& instance, const Schema& schema, int n_negatives,
                                       std::uint64_t seed) {
  const auto used = referenced_columns(parse_sql(instance.gold_sql, schema));
  const std::set<std::string> used_set(used.begin(), used.end());
  const SchemaCatalog catalog(schema);
  std::vector<SIPTExample> out;
  std::vector<int> unused;
  for (int c = 0; c < catalog.n_columns(); ++c) {
    if (used_set.count(to_lower(catalog.column_name(c))))
      out.push_back({&instance.features, catalog.column_name(c), split_identifier(catalog.column_name(c)), 1});
    else
      unused.push_back(c);
  }
  std::mt19937_64 rng(seed ^ fnv1a64(instance.id));
  std::shuffle(unused.begin(), unused.end(), rng);
  const int k = std::min<int>(std::max(0, n_negatives), static_cast<int>(unused.size()));
  for (int i = 0; i < k; ++i) {
    const std::string& name = catalog.column_name(unused[static_cast<std::size_t>(i)]);
    out.push_back({&instance.features, name, split_identifier(name), 0});
  }
  return out;
}

ag::Matrix adaptive_pool_matrix(int frames, int bins) {
  if (frames < 1 || bins < 1) throw Error(ErrorCode::kInvalidArgument, "adaptive pooling needs frames, bins >= 1");
  ag::Matrix p = ag::Matrix::Zero(frames, bins);
  for (int k = 0; k < bins; ++k) {
    const int lo = static_cast<int>(std::floor(static_cast<double>(k) * frames / bins));
    const int hi = std::max(lo + 1, static_cast<int>(std::ceil(static_cast<double>(k + 1) * frames / bins)));
    for (int t = lo; t < hi; ++t) p(t, k) = 1.0 / (hi - lo);
  }
  return p;
}

ag::Var sipt_loss(ag::Context& ctx, ParamStore& store, const ModelConfig& cfg, const Vocabulary& vocab,
                  const std::vector<SIPTExample>& examples, std::vector<double>* probs) {
  if (examples.empty()) throw Error(ErrorCode::kEmptyExamples, "no speech-item examples");
  std::map<const SpeechFeatures*, int> slot;
  std::vector<ag::Matrix> padded;
  std::vector<int> valid;
  for (const auto& e : examples) {
    if (slot.emplace(e.features, static_cast<int>(padded.size())).second) {
      padded.push_back(pad_or_resample(*e.features, cfg.input_frames).data);
      valid.push_back(valid_output_frames(cfg, e.features->frames()));
    }
  }
  std::vector<const ag::Matrix*> ptrs;
  for (const auto& m : padded) ptrs.push_back(&m);
  ag::Var za = encode_speech_batch(ctx, store, cfg.speech, ptrs);
  const Eigen::Index l = za.rows() / static_cast<Eigen::Index>(padded.size());

  std::vector<std::vector<int>> ids;
  for (const auto& e : examples) {
    auto v = vocab.encode(e.item_tokens);
    if (v.empty()) v.push_back(Vocabulary::kUnk);
    ids.push_back(std::move(v));
  }
  ag::Var items = ag::normalize_rows(encode_token_lists(ctx, store, cfg.schema, ids).pooled);
  const int bins = static_cast<int>(store.at("sipt.w").value.rows());
  ag::Var w = ctx.param(store.at("sipt.w"));
  ag::Var bias = ctx.param(store.at("sipt.b"));

  std::vector<ag::Var> logits;
  ag::Matrix labels(1, static_cast<Eigen::Index>(examples.size()));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const int s = slot.at(examples[i].features);
    const int frames = valid[static_cast<std::size_t>(s)];
    ag::Var rows = ag::normalize_rows(ag::slice_rows(za, s * l, frames));
    ag::Var cosines = ag::matmul_nt(ag::slice_rows(items, static_cast<Eigen::Index>(i), 1), rows);  // 1 x frames
    ag::Var pooled = ag::matmul(cosines, ag::constant(adaptive_pool_matrix(frames, bins)));
    logits.push_back(ag::linear(pooled, w, bias));
    labels(0, static_cast<Eigen::Index>(i)) = examples[i].label;
  }
  ag::Var p = ag::clamp(ag::sigmoid(ag::hcat(logits)), 1e-7, 1.0 - 1e-7);
  if (probs) probs->assign(p.value().data(), p.value().data() + p.value().size());
  ag::Matrix ones = ag::Matrix::Ones(1, labels.cols());
  ag::Var y = ag::constant(labels);
  ag::Var pos = ag::mul(y, ag::log(p));
  ag::Var neg = ag::mul(ag::constant(ones - labels), ag::log(ag::sub(ag::constant(ones), p)));
  return ag::scale(ag::mean(ag::add(pos, neg)), -1.0);
}

namespace {

std::vector<NamedTensor> encoder_weights(const ParamStore& store) {
  std::vector<NamedTensor> out;
  for (auto& t : snapshot(store))
    if (pretrained_name(t.name)) out.push_back(std::move(t));
  return out;
}

void write_checkpoint(const std::filesystem::path& dir, int epoch, const ParamStore& store, const Adam& adam,
                      const PretrainConfig& cfg, const std::vector<PretrainEpoch>& history) {
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> tensors = snapshot(store);
  for (auto& t : adam.state()) tensors.push_back(std::move(t));
  json hist = json::array();
  for (const auto& h : history)
    hist.push_back({{"epoch", h.epoch}, {"la", h.la}, {"ls", h.ls}, {"lp", h.lp}, {"sipt", h.sipt}, {"seconds", h.seconds}});
  json meta{{"format", "speechsql-pretrain"},
            {"epoch", epoch},
            {"config", json::parse(model_config_to_json(cfg.model))},
            {"sspt", cfg.sspt},
            {"sipt", cfg.sipt},
            {"seed", cfg.seed},
            {"history", hist}};
  if (!history.empty()) {
    const auto& last = history.back();
    meta["loss"] = {{"la", last.la}, {"ls", last.ls}, {"lp", last.lp}, {"sipt", last.sipt}};
  }
  const std::string stem = std::to_string(epoch);
  {
    std::ofstream os(dir / (stem + ".bin"), std::ios::binary);
    if (!os) throw Error(ErrorCode::kIo, "cannot write checkpoint in " + dir.string());
    write_tensors(os, meta.dump(), tensors);
  }
  std::ofstream js(dir / (stem + ".json"));
  js << meta.dump(2) << "\n";
}

}  // namespace

PretrainResult run_pretraining(const std::vector<Instance>& instances, const SchemaStore& schemas,
                               const Vocabulary& vocab, const PretrainConfig& cfg) {
  cfg.model.validate();
  ParamStore store;
  std::mt19937_64 init_rng(cfg.seed);
  init_speech_encoder(store, cfg.model.speech, init_rng);
  init_schema_encoder(store, cfg.model.schema, vocab.size(), init_rng);
  init_pretrain_heads(store, cfg.model, vocab.size(), cfg.sipt_bins, init_rng);

  PretrainResult result;
  result.vocabulary = vocab.words();
  if (!cfg.init_weights.empty()) {
    std::vector<NamedTensor> init;
    for (const auto& t : cfg.init_weights)
      if (pretrained_name(t.name)) init.push_back(t);
    const LoadReport r = load_into(store, init);
    if (!r.shape_mismatch.empty() || !r.unexpected.empty())
      throw Error(ErrorCode::kCheckpointMismatch, "initial weights do not fit the pre-training model");
  }
  if (!cfg.sspt && !cfg.sipt) {
    result.weights = encoder_weights(store);
    return result;
  }
  if (instances.empty()) throw Error(ErrorCode::kEmptyInput, "no pre-training instances");
  if (cfg.sspt) {
    for (const auto& inst : instances)
      if (!inst.transcript || inst.transcript->empty())
        throw Error(ErrorCode::kMissingTranscripts, "instance " + inst.id + " has no transcript");
    if (instances.size() < 2) throw Error(ErrorCode::kBatchTooSmall, "speech-sentence pre-training needs two pairs");
  }
  if (cfg.batch_size < 2) throw Error(ErrorCode::kBatchTooSmall, "pre-training batch size must be at least 2");

  std::vector<ag::Matrix> padded;
  std::vector<std::vector<int>> transcripts;
  std::vector<int> valid;
  for (const auto& inst : instances) {
    padded.push_back(pad_or_resample(inst.features, cfg.model.input_frames).data);
    valid.push_back(valid_output_frames(cfg.model, inst.features.frames()));
    std::vector<std::string> words;
    if (inst.transcript)
      for (const auto& w : *inst.transcript) words.push_back(to_lower(w));
    auto ids = vocab.encode(words);
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    transcripts.push_back(std::move(ids));
  }

  Adam adam(cfg.lr);
  int start = 1;
  if (!cfg.resume.empty()) {
    std::ifstream is(cfg.resume, std::ios::binary);
    if (!is) throw Error(ErrorCode::kIo, "cannot read " + cfg.resume.string());
    std::string header;
    auto tensors = read_tensors(is, &header);
    json meta = json::parse(header);
    if (meta.value("format", std::string()) != "speechsql-pretrain" ||
        meta.at("config").dump() != json::parse(model_config_to_json(cfg.model)).dump())
      throw Error(ErrorCode::kCheckpointMismatch, cfg.resume.string() + " does not match this configuration");
    std::vector<NamedTensor> params, state;
    for (auto& t : tensors) (t.name.rfind("adam.", 0) == 0 ? state : params).push_back(std::move(t));
    const LoadReport r = load_into(store, params);
    if (!r.missing.empty() || !r.unexpected.empty() || !r.shape_mismatch.empty())
      throw Error(ErrorCode::kCheckpointMismatch, cfg.resume.string() + " has a different parameter set");
    adam.load_state(state);
    for (const auto& h : meta.at("history"))
      result.history.push_back({h.at("epoch"), h.at("la"), h.at("ls"), h.at("lp"), h.at("sipt"), h.at("seconds")});
    start = meta.at("epoch").get<int>() + 1;
  }

  const std::size_t n = instances.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = start; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    PretrainEpoch rec;
    rec.epoch = epoch;
    int batches = 0;
    for (std::size_t begin = 0; begin < n; begin += bs) {
      std::size_t end = std::min(n, begin + bs);
      if (n - end < 2 && n - end > 0) end = n;  // no trailing batch of one
      ag::Context ctx(true, rng());
      std::vector<ag::Var> terms;
      if (cfg.sspt) {
        PairBatch batch;
        for (std::size_t i = begin; i < end; ++i) {
          batch.speech.push_back(&padded[order[i]]);
          batch.transcripts.push_back(transcripts[order[i]]);
          batch.valid_frames.push_back(valid[order[i]]);
        }
        SSPTLoss l = sspt_loss(ctx, store, cfg.model, batch);
        terms.push_back(l.total);
        rec.la += l.la.scalar();
        rec.ls += l.ls.scalar();
        rec.lp += l.lp.scalar();
      }
      if (cfg.sipt) {
        std::vector<SIPTExample> ex;
        for (std::size_t i = begin; i < end; ++i) {
          const Instance& inst = instances[order[i]];
          auto e = sipt_examples(inst, schemas.at(inst.db_id), cfg.n_negatives,
                                 cfg.seed + static_cast<std::uint64_t>(epoch));
          ex.insert(ex.end(), e.begin(), e.end());
        }
        if (!ex.empty()) {
          ag::Var l = sipt_loss(ctx, store, cfg.model, vocab, ex);
          terms.push_back(l);
          rec.sipt += l.scalar();
        }
      }
      ++batches;
      if (terms.empty()) continue;
      ag::Var total = terms.size() == 1 ? terms[0] : ag::add(terms[0], terms[1]);
      ag::backward(total);
      ctx.accumulate_grads();
      store.clip_grad_norm(cfg.clip_norm);
      adam.step(store);
      store.zero_grad();
      if (end == n) break;
    }
    rec.la /= batches;
    rec.ls /= batches;
    rec.lp /= batches;
    rec.sipt /= batches;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (!cfg.out_dir.empty()) write_checkpoint(cfg.out_dir / "ckpt", epoch, store, adam, cfg, result.history);
    if (cfg.stop_after_epoch > 0 && epoch >= cfg.stop_after_epoch) break;
  }
  result.weights = encoder_weights(store);
  result.trained = true;
  return result;
}

LoadReport apply_pretrained(Model& model, const std::vector<NamedTensor>& weights) {
  std::vector<NamedTensor> filtered;
  for (const auto& t : weights)
    if (pretrained_name(t.name)) filtered.push_back(t);
  LoadReport r = load_into(model.params(), filtered);
  if (!r.shape_mismatch.empty() || !r.unexpected.empty())
    throw Error(ErrorCode::kCheckpointMismatch, "pre-trained tensor '" +
                                                    (r.shape_mismatch.empty() ? r.unexpected : r.shape_mismatch).front() +
                                                    "' does not fit the model");
  return r;
}

void write_pretrained(const std::filesystem::path& path, const PretrainResult& result) {
  json hist = json::array();
  for (const auto& h : result.history)
    hist.push_back({{"epoch", h.epoch}, {"la", h.la}, {"ls", h.ls}, {"lp", h.lp}, {"sipt", h.sipt}, {"seconds", h.seconds}});
  json meta{{"format", "speechsql-pretrained"},
            {"trained", result.trained},
            {"history", hist},
            {"vocabulary", result.vocabulary}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  write_tensors(os, meta.dump(), result.weights);
}

PretrainResult read_pretrained(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::string header;
  PretrainResult r;
  r.weights = read_tensors(is, &header);
  try {
    const json meta = json::parse(header);
    if (meta.value("format", std::string()) != "speechsql-pretrained")
      throw Error(ErrorCode::kCheckpointMismatch, path.string() + " is not a pre-trained weight file");
    r.trained = meta.at("trained").get<bool>();
    r.vocabulary = meta.value("vocabulary", std::vector<std::string>{});
    for (const auto& h : meta.at("history"))
      r.history.push_back({h.at("epoch"), h.at("la"), h.at("ls"), h.at("lp"), h.at("sipt"), h.at("seconds")});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCheckpointMismatch, path.string() + ": " + e.what());
  }
  return r;
}

}  // namespace speechsql
