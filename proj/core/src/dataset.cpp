#include "speechsql/dataset.hpp"

#include "speechsql/error.hpp"
#include "speechsql/eval.hpp"
#include "speechsql/sql.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace speechsql {

using nlohmann::json;

namespace {

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

bool has_suffix(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && iequals(std::string_view(s).substr(s.size() - suffix.size()), suffix);
}

}  // namespace

SpeechFeatures load_audio(const std::string& audio, const BuildOptions& opts) {
  if (audio.rfind(kPseudoPrefix, 0) == 0) {
    const auto tokens = split_ws(std::string_view(audio).substr(kPseudoPrefix.size()));
    return synth_pseudo_speech(tokens, opts.tts);
  }
  std::filesystem::path p(audio);
  if (p.is_relative() && !opts.base_dir.empty()) p = opts.base_dir / p;
  if (has_suffix(audio, ".wav")) return extract_logmel(read_wav(p));
  return read_feature_file(p);
}

Instance build_instance(const ManifestRecord& record, const Schema& schema, const Grammar& grammar,
                        const BuildOptions& opts) {
  const Query q = parse_sql(record.sql, schema);
  std::vector<std::string> candidates = query_literals(q);
  std::set<std::string> seen;
  for (const auto& c : candidates) seen.insert(normalize_literal(c));

  std::mt19937_64 rng(opts.seed ^ fnv1a64(record.id));
  std::vector<std::string> pool;
  for (const auto& v : schema.value_pool)
    if (seen.insert(normalize_literal(v)).second) pool.push_back(v);
  std::shuffle(pool.begin(), pool.end(), rng);
  const std::size_t k = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(std::max(0, opts.n_distractors)));
  candidates.insert(candidates.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::shuffle(candidates.begin(), candidates.end(), rng);

  Instance inst;
  inst.id = record.id;
  inst.db_id = record.db_id;
  inst.transcript = record.transcript;
  inst.gold_sql = record.sql;
  inst.gold_actions = query_to_actions(q, schema, grammar, candidates);
  inst.candidate_values = std::move(candidates);
  inst.features = load_audio(record.audio, opts);
  return inst;
}

std::vector<ManifestRecord> parse_manifest(std::string_view jsonl) {
  std::vector<ManifestRecord> out;
  std::istringstream is{std::string(jsonl)};
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.db_id = j.at("db_id").get<std::string>();
      r.audio = j.at("audio").get<std::string>();
      r.sql = j.at("sql").get<std::string>();
      if (j.contains("transcript") && !j["transcript"].is_null()) {
        const auto& t = j["transcript"];
        r.transcript = t.is_array() ? t.get<std::vector<std::string>>() : split_ws(t.get<std::string>());
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string manifest_to_jsonl(const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    json j;
    j["id"] = r.id;
    j["db_id"] = r.db_id;
    j["audio"] = r.audio;
    if (r.transcript) j["transcript"] = join_words(*r.transcript);
    j["sql"] = r.sql;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest " + path.string());
  out << manifest_to_jsonl(records);
}

std::vector<Instance> build_instances(const std::vector<ManifestRecord>& records, const SchemaStore& store,
                                      const Grammar& grammar, const BuildOptions& opts) {
  std::vector<Instance> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto it = store.find(r.db_id);
    if (it == store.end()) throw Error(ErrorCode::kMalformedSchema, r.id + ": unknown db_id " + r.db_id);
    try {
      out.push_back(build_instance(r, it->second, grammar, opts));
    } catch (const Error& e) {
      throw Error(e.code(), r.id + ": " + e.what());
    }
  }
  return out;
}

std::vector<Instance> load_dataset(const std::filesystem::path& manifest, const SchemaStore& store,
                                   const Grammar& grammar, BuildOptions opts) {
  if (opts.base_dir.empty()) opts.base_dir = manifest.parent_path();
  return build_instances(read_manifest(manifest), store, grammar, opts);
}

// ------------------------------------------------------------- noise --

std::vector<std::string> inject_asr_noise(const std::vector<std::string>& transcript, const NoiseSpec& spec) {
  if (transcript.empty()) throw Error(ErrorCode::kEmptyTranscript, "cannot add noise to an empty transcript");
  if (spec.target_wer < 0.0 || spec.target_wer > 1.0)
    throw Error(ErrorCode::kInvalidArgument, "target_wer must lie in [0, 1]");
  const int n = static_cast<int>(transcript.size());
  std::mt19937_64 rng(spec.seed ^ fnv1a64(join_words(transcript)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double x = spec.target_wer * n;
  const int lo = static_cast<int>(std::floor(x));
  const int hi = static_cast<int>(std::ceil(x));
  auto within = [&](int k) { return std::abs(static_cast<double>(k) / n - spec.target_wer) <= spec.tolerance + 1e-12; };
  const bool stochastic = unit(rng) < x - lo;
  int k;
  if (within(lo) && within(hi)) k = stochastic ? hi : lo;
  else if (within(lo)) k = lo;
  else if (within(hi)) k = hi;
  else k = stochastic ? hi : lo;
  if (k == 0) return transcript;

  std::vector<std::string> vocab = spec.vocabulary;
  if (vocab.empty()) vocab = transcript;
  auto draw_word = [&](const std::string& avoid) {
    for (int tries = 0; tries < 32; ++tries) {
      const std::string& w = vocab[std::uniform_int_distribution<std::size_t>(0, vocab.size() - 1)(rng)];
      if (w != avoid) return w;
    }
    return std::string("<unk>");
  };

  std::vector<std::string> best;
  int best_gap = -1;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<int> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    std::shuffle(positions.begin(), positions.end(), rng);
    std::vector<int> kind(n, -1);  // 0 substitute, 1 delete, 2 insert after
    for (int i = 0; i < k; ++i) kind[positions[i]] = std::uniform_int_distribution<int>(0, 2)(rng);
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
      switch (kind[i]) {
        case 0: out.push_back(draw_word(transcript[i])); break;
        case 1: break;
        case 2:
          out.push_back(transcript[i]);
          out.push_back(draw_word(i + 1 < n ? transcript[i + 1] : ""));
          break;
        default: out.push_back(transcript[i]);
      }
    }
    const WERReport r = wer(transcript, out);
    const int edits = r.substitutions + r.deletions + r.insertions;
    if (edits == k) return out;
    if (edits > best_gap) {
      best_gap = edits;
      best = std::move(out);
    }
  }
  return best;
}

// --------------------------------------------------------- synthesis --

namespace {

struct TableInfo {
  int index = 0;
  std::vector<int> numeric;
  std::vector<int> text;
};

std::string words_of(std::string_view identifier) { return join_words(split_identifier(identifier)); }

class Generator {
 public:
  Generator(const SchemaStore& store, std::uint64_t seed) : rng_(seed) {
    for (const auto& [id, s] : store) schemas_.push_back(&s);
  }

  std::optional<std::pair<std::string, std::string>> draw(const Schema*& schema) {
    schema = schemas_[pick(schemas_.size())];
    const int tmpl = static_cast<int>(pick(12));
    const int t = static_cast<int>(pick(schema->tables.size()));
    TableInfo info = describe(*schema, t);
    const Table& table = schema->tables[t];
    const std::string tw = words_of(table.name);
    auto col = [&](int c) { return table.columns[c].name; };
    auto cw = [&](int c) { return words_of(table.columns[c].name); };
    auto any_col = [&] { return static_cast<int>(pick(table.columns.size())); };
    auto other_than = [&](const std::vector<int>& from, int avoid) -> int {
      std::vector<int> pool;
      for (int c : from)
        if (c != avoid) pool.push_back(c);
      return pool.empty() ? -1 : pool[pick(pool.size())];
    };
    std::vector<int> all(table.columns.size());
    std::iota(all.begin(), all.end(), 0);

    static const char* agg_sql[] = {"MAX", "MIN", "AVG", "SUM", "COUNT"};
    static const char* agg_words[] = {"highest", "lowest", "average", "total", "number of"};

    switch (tmpl) {
      case 0: {  // aggregate over a table
        const int a = static_cast<int>(pick(5));
        const int c = a == 4 ? any_col() : other_than(info.numeric, -1);
        if (c < 0) return std::nullopt;
        return std::pair{"what is the " + std::string(agg_words[a]) + " " + cw(c) + " of " + tw,
                         "SELECT " + std::string(agg_sql[a]) + "(" + col(c) + ") FROM " + table.name};
      }
      case 1:
      case 2: {  // projection with a numeric comparison
        const int n = other_than(info.numeric, -1);
        const int c = other_than(all, n);
        if (n < 0 || c < 0) return std::nullopt;
        const std::string v = number();
        const bool more = tmpl == 1;
        return std::pair{"show the " + cw(c) + " of " + tw + " with " + cw(n) + (more ? " more than " : " less than ") + v,
                         "SELECT " + col(c) + " FROM " + table.name + " WHERE " + col(n) + (more ? " > " : " < ") + v};
      }
      case 3: {  // aggregate with a condition
        const int a = static_cast<int>(pick(2));
        const int c = other_than(info.numeric, -1);
        const int n = other_than(info.numeric, c);
        if (c < 0 || n < 0) return std::nullopt;
        const std::string v = number();
        return std::pair{"what is the " + std::string(agg_words[a]) + " " + cw(c) + " with " + cw(n) + " more than " + v,
                         "SELECT " + std::string(agg_sql[a]) + "(" + col(c) + ") FROM " + table.name + " WHERE " + col(n) +
                             " > " + v};
      }
      case 4: {  // two columns
        const int c = any_col();
        const int d = other_than(all, c);
        if (d < 0) return std::nullopt;
        return std::pair{"show the " + cw(c) + " and " + cw(d) + " of " + tw,
                         "SELECT " + col(c) + ", " + col(d) + " FROM " + table.name};
      }
      case 5: {  // ordering
        const int n = other_than(info.numeric, -1);
        const int c = other_than(all, n);
        if (n < 0 || c < 0) return std::nullopt;
        const bool desc = pick(2) == 0;
        return std::pair{"list the " + cw(c) + " of " + tw + " sorted by " + cw(n) + (desc ? " descending" : " ascending"),
                         "SELECT " + col(c) + " FROM " + table.name + " ORDER BY " + col(n) + (desc ? " DESC" : " ASC")};
      }
      case 6: {  // top-k
        const int n = other_than(info.numeric, -1);
        const int c = other_than(all, n);
        if (n < 0 || c < 0) return std::nullopt;
        const std::string v = std::to_string(1 + pick(5));
        return std::pair{"list the " + cw(c) + " of the top " + v + " " + tw + " by " + cw(n),
                         "SELECT " + col(c) + " FROM " + table.name + " ORDER BY " + col(n) + " DESC LIMIT " + v};
      }
      case 7: {  // text equality
        const int e = other_than(info.text, -1);
        const int c = other_than(all, e);
        const std::string v = text_value(*schema);
        if (e < 0 || c < 0 || v.empty()) return std::nullopt;
        return std::pair{"show the " + cw(c) + " of " + tw + " whose " + cw(e) + " is " + v,
                         "SELECT " + col(c) + " FROM " + table.name + " WHERE " + col(e) + " = '" + v + "'"};
      }
      case 8: {  // conjunction
        const int n = other_than(info.numeric, -1);
        const int m = other_than(info.numeric, n);
        const int c = other_than(all, -1);
        if (n < 0 || m < 0) return std::nullopt;
        const std::string v = number(), w = number();
        return std::pair{"show the " + cw(c) + " of " + tw + " with " + cw(n) + " more than " + v + " and " + cw(m) +
                             " less than " + w,
                         "SELECT " + col(c) + " FROM " + table.name + " WHERE " + col(n) + " > " + v + " AND " + col(m) +
                             " < " + w};
      }
      case 9: {  // range
        const int n = other_than(info.numeric, -1);
        const int c = other_than(all, n);
        if (n < 0 || c < 0) return std::nullopt;
        int lo = 1 + static_cast<int>(pick(20));
        int hi = lo + 1 + static_cast<int>(pick(20));
        return std::pair{"show the " + cw(c) + " of " + tw + " with " + cw(n) + " between " + std::to_string(lo) + " and " +
                             std::to_string(hi),
                         "SELECT " + col(c) + " FROM " + table.name + " WHERE " + col(n) + " BETWEEN " +
                             std::to_string(lo) + " AND " + std::to_string(hi)};
      }
      case 10: {  // counting with a condition
        const int n = other_than(info.numeric, -1);
        if (n < 0) return std::nullopt;
        const std::string v = number();
        return std::pair{"how many " + tw + " have " + cw(n) + " more than " + v,
                         "SELECT COUNT(" + col(0) + ") FROM " + table.name + " WHERE " + col(n) + " > " + v};
      }
      default:
        return join(*schema);
    }
  }

 private:
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  std::string number() { return std::to_string(1 + pick(40)); }

  static TableInfo describe(const Schema& s, int t) {
    TableInfo info;
    info.index = t;
    for (std::size_t c = 0; c < s.tables[t].columns.size(); ++c)
      (s.tables[t].columns[c].type == ColumnType::kNumber ? info.numeric : info.text).push_back(static_cast<int>(c));
    return info;
  }

  std::string text_value(const Schema& s) {
    std::vector<std::string> words;
    for (const auto& v : s.value_pool)
      if (!is_numeric_literal(v) && v.find(' ') == std::string::npos && to_lower(v) == v) words.push_back(v);
    return words.empty() ? "" : words[pick(words.size())];
  }

  std::optional<std::pair<std::string, std::string>> join(const Schema& s) {
    if (s.foreign_keys.empty()) return std::nullopt;
    const ForeignKey& fk = s.foreign_keys[pick(s.foreign_keys.size())];
    const int a = s.table_index(fk.src_table);
    const int b = s.table_index(fk.dst_table);
    if (a == b) return std::nullopt;
    const Table& ta = s.tables[a];
    const Table& tb = s.tables[b];
    std::vector<int> ca, cb;
    for (std::size_t c = 0; c < ta.columns.size(); ++c)
      if (!iequals(ta.columns[c].name, fk.src_column) && s.tables[b].columns.end() ==
          std::find_if(tb.columns.begin(), tb.columns.end(), [&](const Column& x) { return iequals(x.name, ta.columns[c].name); }))
        ca.push_back(static_cast<int>(c));
    for (std::size_t c = 0; c < tb.columns.size(); ++c)
      if (!iequals(tb.columns[c].name, fk.dst_column) && ta.columns.end() ==
          std::find_if(ta.columns.begin(), ta.columns.end(), [&](const Column& x) { return iequals(x.name, tb.columns[c].name); }))
        cb.push_back(static_cast<int>(c));
    if (ca.empty() || cb.empty()) return std::nullopt;
    const int x = ca[pick(ca.size())];
    const int y = cb[pick(cb.size())];
    const bool numeric = tb.columns[y].type == ColumnType::kNumber;
    const std::string v = numeric ? number() : text_value(s);
    if (v.empty()) return std::nullopt;
    const std::string lit = numeric ? v : "'" + v + "'";
    return std::pair{"show the " + words_of(ta.columns[x].name) + " of " + words_of(ta.name) + " whose " + words_of(tb.name) +
                         " " + words_of(tb.columns[y].name) + " is " + v,
                     "SELECT T1." + ta.columns[x].name + " FROM " + ta.name + " AS T1 JOIN " + tb.name + " AS T2 ON T1." +
                         fk.src_column + " = T2." + fk.dst_column + " WHERE T2." + tb.columns[y].name + " = " + lit};
  }

  std::mt19937_64 rng_;
  std::vector<const Schema*> schemas_;
};

}  // namespace

std::vector<ManifestRecord> synth_records(const SchemaStore& store, int n, const SynthOptions& opts) {
  if (store.empty()) throw Error(ErrorCode::kEmptyInput, "schema store is empty");
  Generator gen(store, opts.seed);
  std::vector<ManifestRecord> out;
  std::set<std::pair<std::string, std::string>> seen;
  const Grammar& grammar = default_grammar();
  int failures = 0;
  while (static_cast<int>(out.size()) < n) {
    const Schema* schema = nullptr;
    auto drawn = gen.draw(schema);
    if (!drawn || static_cast<int>(split_ws(drawn->first).size()) > opts.max_words ||
        !seen.emplace(drawn->first, schema->db_id).second) {
      if (++failures > 1000 * std::max(n, 1))
        throw Error(ErrorCode::kInvalidArgument, "schema store cannot supply " + std::to_string(n) + " distinct questions");
      continue;
    }
    // Every emitted query must lie inside the supported subset.
    sql_to_actions(drawn->second, *schema, grammar);
    ManifestRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06d", static_cast<int>(out.size()));
    r.id = id;
    r.db_id = schema->db_id;
    r.transcript = split_ws(drawn->first);
    r.audio = std::string(kPseudoPrefix) + drawn->first;
    r.sql = drawn->second;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::string> transcript_vocabulary(const std::vector<ManifestRecord>& records) {
  std::set<std::string> words;
  for (const auto& r : records)
    if (r.transcript) words.insert(r.transcript->begin(), r.transcript->end());
  return {words.begin(), words.end()};
}

SynthSplit synth_split(const SchemaStore& store, int n_train, int n_test, const SynthOptions& opts) {
  auto pool = synth_records(store, n_train + 4 * n_test, opts);
  SynthSplit split;
  split.train.assign(pool.begin(), pool.begin() + n_train);
  const auto vocab = transcript_vocabulary(split.train);
  const std::set<std::string> known(vocab.begin(), vocab.end());
  for (std::size_t i = static_cast<std::size_t>(n_train); i < pool.size() && static_cast<int>(split.test.size()) < n_test; ++i) {
    const auto& words = *pool[i].transcript;
    if (std::all_of(words.begin(), words.end(), [&](const std::string& w) { return known.count(w) > 0; }))
      split.test.push_back(pool[i]);
  }
  if (static_cast<int>(split.test.size()) < n_test)
    throw Error(ErrorCode::kInvalidArgument, "could not draw enough held-out questions within the training vocabulary");
  return split;
}

}  // namespace speechsql
