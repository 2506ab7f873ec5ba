#pragma once

// Schema graph construction, token-level BiLSTM node embedding and the
// two-layer GCN over the merged table/column graph.

#include "speechsql/autograd.hpp"
#include "speechsql/params.hpp"
#include "speechsql/schema.hpp"

#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace speechsql {

/// Word inventory shared by node names, candidate values and transcripts.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  Vocabulary();
  int add(const std::string& word);
  int id(const std::string& word) const;  // kUnk when absent
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  const std::vector<std::string>& words() const { return words_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercased whitespace tokens of a literal value, split further on
/// identifier boundaries.
std::vector<std::string> value_tokens(const std::string& value);

enum class NodeKind { kTable, kColumn };
enum class EdgeType { kTableColumn, kForeignKey };

struct GraphNode {
  NodeKind kind = NodeKind::kTable;
  std::string name;
  std::vector<std::string> tokens;
};

struct GraphEdge {
  int a = 0;
  int b = 0;
  EdgeType type = EdgeType::kTableColumn;
};

/// Table nodes first (schema order), then one node per distinct column name
/// (SchemaCatalog order), so column c is node n_tables + c.
struct SchemaGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::map<std::string, std::vector<ColumnKey>> merged_map;  // lowercase name -> members
  int n_tables = 0;

  int n_nodes() const { return static_cast<int>(nodes.size()); }
  /// D^-1/2 (A + I) D^-1/2.
  ag::Matrix normalized_adjacency() const;
};

SchemaGraph build_schema_graph(const Schema& schema);

enum class GraphAblation { kIdentity, kRnn };

struct SchemaEncoderConfig {
  int embed_dim = 300;
  int lstm_hidden = 512;
  int d_model = 512;
  bool use_gcn = true;
  GraphAblation ablation = GraphAblation::kIdentity;  // used when !use_gcn
};

/// Token encoder ("text.") and graph encoder ("schema.") parameters.
void init_schema_encoder(ParamStore& store, const SchemaEncoderConfig& cfg, int vocab_size, std::mt19937_64& rng);

struct TokenEncoding {
  ag::Var pooled;  // (n, d_model): FFN([last forward ; last backward])
  /// Per-sequence (len, 2*hidden) token states, filled on request.
  std::vector<ag::Var> token_states;
};

/// Batched BiLSTM over id sequences (each non-empty).
TokenEncoding encode_token_lists(ag::Context& ctx, ParamStore& store, const SchemaEncoderConfig& cfg,
                                 const std::vector<std::vector<int>>& ids, bool want_token_states = false);

/// FFN applied to token-state rows, (n, 2*hidden) -> (n, d_model).
ag::Var token_ffn(ag::Context& ctx, ParamStore& store, const ag::Var& states);

/// H_s for the graph's nodes. Throws EmptyNodeName.
ag::Var embed_nodes(ag::Context& ctx, ParamStore& store, const SchemaEncoderConfig& cfg, const Vocabulary& vocab,
                    const SchemaGraph& graph);

/// Z_s = A ReLU(A H Theta1) Theta2, or the configured ablation when
/// cfg.use_gcn is false.
ag::Var encode_graph(ag::Context& ctx, ParamStore& store, const SchemaEncoderConfig& cfg, const ag::Var& h,
                     const SchemaGraph& graph);

/// The two-layer GCN alone on a dense normalized adjacency.
ag::Var gcn(const ag::Var& h, const ag::Matrix& adjacency, const ag::Var& theta1, const ag::Var& theta2);

/// Single-direction masked LSTM over a batch of equal-length step inputs.
/// lengths[i] steps are consumed for row i; returns the state after each
/// step (rows past their length keep their final state).
std::vector<ag::Var> run_lstm(const std::vector<ag::Var>& steps, const std::vector<int>& lengths, const ag::Var& wx,
                              const ag::Var& wh, const ag::Var& b, int hidden);

}  // namespace speechsql
