#include "speechsql/schema_encoder.hpp"

#include "speechsql/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace speechsql {

Vocabulary::Vocabulary() {
  for (const char* w : {"<pad>", "<unk>", "<bos>", "<eos>"}) add(w);
}

int Vocabulary::add(const std::string& word) {
  auto [it, inserted] = index_.emplace(word, static_cast<int>(words_.size()));
  if (inserted) words_.push_back(word);
  return it->second;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> value_tokens(const std::string& value) {
  std::vector<std::string> out;
  std::istringstream is(value);
  std::string w;
  while (is >> w) out.push_back(to_lower(w));
  return out;
}

ag::Matrix SchemaGraph::normalized_adjacency() const {
  const int n = n_nodes();
  ag::Matrix a = ag::Matrix::Identity(n, n);
  for (const auto& e : edges) {
    a(e.a, e.b) = 1.0;
    a(e.b, e.a) = 1.0;
  }
  const Eigen::VectorXd inv_sqrt = a.rowwise().sum().array().rsqrt();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

SchemaGraph build_schema_graph(const Schema& schema) {
  const SchemaCatalog catalog(schema);
  SchemaGraph g;
  g.n_tables = catalog.n_tables();
  for (const auto& t : schema.tables) g.nodes.push_back({NodeKind::kTable, t.name, split_identifier(t.name)});
  for (int c = 0; c < catalog.n_columns(); ++c)
    g.nodes.push_back({NodeKind::kColumn, catalog.column_name(c), split_identifier(catalog.column_name(c))});

  std::set<std::pair<int, int>> seen;
  auto add_edge = [&](int a, int b, EdgeType type) {
    if (a == b) return;
    if (seen.emplace(std::min(a, b), std::max(a, b)).second) g.edges.push_back({a, b, type});
  };
  for (int t = 0; t < catalog.n_tables(); ++t)
    for (const auto& col : schema.tables[t].columns) {
      add_edge(t, g.n_tables + catalog.find_column(col.name), EdgeType::kTableColumn);
      g.merged_map[to_lower(col.name)].push_back({schema.tables[t].name, col.name});
    }
  for (const auto& fk : schema.foreign_keys) {
    const int a = g.n_tables + catalog.find_column(fk.src_column);
    const int b = g.n_tables + catalog.find_column(fk.dst_column);
    if (a == b)
      add_edge(catalog.find_table(fk.src_table), catalog.find_table(fk.dst_table), EdgeType::kForeignKey);
    else
      add_edge(a, b, EdgeType::kForeignKey);
  }
  return g;
}

namespace {

void init_lstm(ParamStore& store, const std::string& prefix, int in, int hidden, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  store.create(prefix + ".wx", init::uniform(in, 4 * hidden, bound, rng));
  store.create(prefix + ".wh", init::uniform(hidden, 4 * hidden, bound, rng));
  ag::Matrix b = ag::Matrix::Zero(1, 4 * hidden);
  b.middleCols(hidden, hidden).setOnes();  // forget gate
  store.create(prefix + ".b", std::move(b));
}

}  // namespace

void init_schema_encoder(ParamStore& store, const SchemaEncoderConfig& cfg, int vocab_size, std::mt19937_64& rng) {
  store.create("text.embed", init::normal(vocab_size, cfg.embed_dim, 1.0, rng));
  init_lstm(store, "text.fwd", cfg.embed_dim, cfg.lstm_hidden, rng);
  init_lstm(store, "text.bwd", cfg.embed_dim, cfg.lstm_hidden, rng);
  store.create("text.ffn.w1", init::xavier(2 * cfg.lstm_hidden, cfg.d_model, rng));
  store.create("text.ffn.b1", init::zeros(1, cfg.d_model));
  store.create("text.ffn.w2", init::xavier(cfg.d_model, cfg.d_model, rng));
  store.create("text.ffn.b2", init::zeros(1, cfg.d_model));
  store.create("schema.gcn.theta1", init::xavier(cfg.d_model, cfg.d_model, rng));
  store.create("schema.gcn.theta2", init::xavier(cfg.d_model, cfg.d_model, rng));
  if (!cfg.use_gcn && cfg.ablation == GraphAblation::kRnn) {
    const int h = std::max(1, cfg.d_model / 2);
    init_lstm(store, "schema.rnn.fwd", cfg.d_model, h, rng);
    init_lstm(store, "schema.rnn.bwd", cfg.d_model, h, rng);
    store.create("schema.rnn.proj.w", init::xavier(2 * h, cfg.d_model, rng));
    store.create("schema.rnn.proj.b", init::zeros(1, cfg.d_model));
  }
}

std::vector<ag::Var> run_lstm(const std::vector<ag::Var>& steps, const std::vector<int>& lengths, const ag::Var& wx,
                              const ag::Var& wh, const ag::Var& b, int hidden) {
  std::vector<ag::Var> out;
  if (steps.empty()) return out;
  const Eigen::Index n = steps.front().rows();
  ag::Var h = ag::constant(ag::Matrix::Zero(n, hidden));
  ag::Var c = ag::constant(ag::Matrix::Zero(n, hidden));
  for (std::size_t t = 0; t < steps.size(); ++t) {
    ag::Var hc = ag::lstm_cell(steps[t], h, c, wx, wh, b);
    ag::Var h_new = ag::slice_cols(hc, 0, hidden);
    ag::Var c_new = ag::slice_cols(hc, hidden, hidden);
    bool all_active = true;
    ag::Matrix keep(n, hidden);
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool active = static_cast<int>(t) < lengths[static_cast<std::size_t>(i)];
      all_active = all_active && active;
      keep.row(i).setConstant(active ? 1.0 : 0.0);
    }
    if (all_active) {
      h = h_new;
      c = c_new;
    } else {
      ag::Var m = ag::constant(keep);
      ag::Var m_inv = ag::constant(ag::Matrix::Ones(n, hidden) - keep);
      h = ag::add(ag::mul(h_new, m), ag::mul(h, m_inv));
      c = ag::add(ag::mul(c_new, m), ag::mul(c, m_inv));
    }
    out.push_back(h);
  }
  return out;
}

ag::Var token_ffn(ag::Context& ctx, ParamStore& store, const ag::Var& states) {
  ag::Var x = ag::relu(ag::linear(states, ctx.param(store.at("text.ffn.w1")), ctx.param(store.at("text.ffn.b1"))));
  return ag::linear(x, ctx.param(store.at("text.ffn.w2")), ctx.param(store.at("text.ffn.b2")));
}

TokenEncoding encode_token_lists(ag::Context& ctx, ParamStore& store, const SchemaEncoderConfig& cfg,
                                 const std::vector<std::vector<int>>& ids, bool want_token_states) {
  if (ids.empty()) throw Error(ErrorCode::kEmptyInput, "no token sequences to encode");
  std::vector<int> lengths;
  int max_len = 0;
  for (const auto& seq : ids) {
    if (seq.empty()) throw Error(ErrorCode::kEmptyNodeName, "token sequence is empty");
    lengths.push_back(static_cast<int>(seq.size()));
    max_len = std::max(max_len, static_cast<int>(seq.size()));
  }
  ag::Var embed = ctx.param(store.at("text.embed"));
  std::vector<ag::Var> fwd_in, bwd_in;
  for (int t = 0; t < max_len; ++t) {
    std::vector<int> f(ids.size(), Vocabulary::kPad), b(ids.size(), Vocabulary::kPad);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t < lengths[i]) {
        f[i] = ids[i][static_cast<std::size_t>(t)];
        b[i] = ids[i][static_cast<std::size_t>(lengths[i] - 1 - t)];
      }
    }
    fwd_in.push_back(ag::gather_rows(embed, f));
    bwd_in.push_back(ag::gather_rows(embed, b));
  }
  const int hid = cfg.lstm_hidden;
  auto fwd = run_lstm(fwd_in, lengths, ctx.param(store.at("text.fwd.wx")), ctx.param(store.at("text.fwd.wh")),
                      ctx.param(store.at("text.fwd.b")), hid);
  auto bwd = run_lstm(bwd_in, lengths, ctx.param(store.at("text.bwd.wx")), ctx.param(store.at("text.bwd.wh")),
                      ctx.param(store.at("text.bwd.b")), hid);
  TokenEncoding enc;
  enc.pooled = token_ffn(ctx, store, ag::hcat({fwd.back(), bwd.back()}));
  if (want_token_states) {
    const int n = static_cast<int>(ids.size());
    ag::Var all_f = ag::vcat(fwd);
    ag::Var all_b = ag::vcat(bwd);
    for (int i = 0; i < n; ++i) {
      std::vector<int> rf, rb;
      for (int t = 0; t < lengths[static_cast<std::size_t>(i)]; ++t) {
        rf.push_back(t * n + i);
        rb.push_back((lengths[static_cast<std::size_t>(i)] - 1 - t) * n + i);
      }
      enc.token_states.push_back(ag::hcat({ag::gather_rows(all_f, rf), ag::gather_rows(all_b, rb)}));
    }
  }
  return enc;
}

ag::Var embed_nodes(ag::Context& ctx, ParamStore& store, const SchemaEncoderConfig& cfg, const Vocabulary& vocab,
                    const SchemaGraph& graph) {
  std::vector<std::vector<int>> ids;
  for (const auto& node : graph.nodes) {
    if (node.tokens.empty()) throw Error(ErrorCode::kEmptyNodeName, "node '" + node.name + "' has no tokens");
    ids.push_back(vocab.encode(node.tokens));
  }
  return encode_token_lists(ctx, store, cfg, ids).pooled;
}

ag::Var gcn(const ag::Var& h, const ag::Matrix& adjacency, const ag::Var& theta1, const ag::Var& theta2) {
  if (adjacency.rows() != h.rows() || adjacency.cols() != h.rows())
    throw Error(ErrorCode::kShapeMismatch, "adjacency does not match the node count");
  ag::Var a = ag::constant(adjacency);
  ag::Var first = ag::relu(ag::matmul(a, ag::matmul(h, theta1)));
  return ag::matmul(a, ag::matmul(first, theta2));
}

ag::Var encode_graph(ag::Context& ctx, ParamStore& store, const SchemaEncoderConfig& cfg, const ag::Var& h,
                     const SchemaGraph& graph) {
  if (h.rows() != graph.n_nodes())
    throw Error(ErrorCode::kShapeMismatch, "H_s has " + std::to_string(h.rows()) + " rows for " +
                                               std::to_string(graph.n_nodes()) + " nodes");
  if (cfg.use_gcn)
    return gcn(h, graph.normalized_adjacency(), ctx.param(store.at("schema.gcn.theta1")),
               ctx.param(store.at("schema.gcn.theta2")));
  if (cfg.ablation == GraphAblation::kIdentity) return h;
  const int n = graph.n_nodes();
  const int hid = std::max(1, cfg.d_model / 2);
  std::vector<ag::Var> f_in, b_in;
  for (int t = 0; t < n; ++t) {
    f_in.push_back(ag::slice_rows(h, t, 1));
    b_in.push_back(ag::slice_rows(h, n - 1 - t, 1));
  }
  const std::vector<int> len{n};
  auto f = run_lstm(f_in, len, ctx.param(store.at("schema.rnn.fwd.wx")), ctx.param(store.at("schema.rnn.fwd.wh")),
                    ctx.param(store.at("schema.rnn.fwd.b")), hid);
  auto b = run_lstm(b_in, len, ctx.param(store.at("schema.rnn.bwd.wx")), ctx.param(store.at("schema.rnn.bwd.wh")),
                    ctx.param(store.at("schema.rnn.bwd.b")), hid);
  std::vector<ag::Var> rows;
  for (int t = 0; t < n; ++t) rows.push_back(ag::hcat({f[static_cast<std::size_t>(t)], b[static_cast<std::size_t>(n - 1 - t)]}));
  return ag::linear(ag::vcat(rows), ctx.param(store.at("schema.rnn.proj.w")), ctx.param(store.at("schema.rnn.proj.b")));
}

}  // namespace speechsql
