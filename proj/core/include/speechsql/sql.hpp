#pragma once

// The supported SQL subset, its parser/renderer, and conversion to and from
// SemQL action sequences.

#include "speechsql/schema.hpp"
#include "speechsql/semql.hpp"

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace speechsql {

enum class Aggregate { kNone, kMax, kMin, kCount, kSum, kAvg };

std::string_view aggregate_keyword(Aggregate a);  // "none", "max", ...

/// A column resolved against a schema: table index plus the column's
/// spelling as declared in that table.
struct ColumnRef {
  int table = -1;
  std::string column;
};

struct SelectItem {
  Aggregate agg = Aggregate::kNone;
  ColumnRef col;
};

struct Query;

struct Condition {
  enum class Kind { kAnd, kOr, kNot, kCompare, kLike, kBetween, kSubquery };

  Kind kind = Kind::kCompare;
  /// kCompare: = != < > <= >=; kSubquery: = > < in not_in.
  std::string op;
  SelectItem lhs;
  std::vector<std::string> values;  // unquoted literal text
  std::shared_ptr<Query> subquery;
  std::vector<Condition> children;
};

struct OrderClause {
  bool descending = false;
  SelectItem item;
  std::optional<std::string> limit;
};

enum class SetOp { kNone, kIntersect, kUnion, kExcept };

struct Query {
  std::vector<SelectItem> select;
  std::vector<int> from_tables;  // as written; informational only
  std::optional<Condition> where;
  std::optional<OrderClause> order;
  SetOp set_op = SetOp::kNone;
  std::shared_ptr<Query> rhs;
};

/// Parses and resolves SQL. Throws UnsupportedSQL, UnknownColumn,
/// UnknownTable.
Query parse_sql(std::string_view sql, const Schema& schema);

/// Flattens AND/OR chains, orders their members by (column, operator,
/// canonical text) and rebuilds them right-deep.
Query canonicalize(const Query& q);

/// Canonical SQL text: uppercase keywords, T1..Tn aliases when more than one
/// table is involved, joins along foreign-key paths.
std::string render_sql(const Query& q, const Schema& schema);

/// Distinct literals in pre-order of first appearance.
std::vector<std::string> query_literals(const Query& q);

/// "1" and "1.0" normalize alike; quotes are stripped; other text is kept.
std::string normalize_literal(std::string_view literal);
bool is_numeric_literal(std::string_view literal);

/// Pre-order SemQL walk. SelectValue indices address `candidates`, matched
/// by normalized literal; throws InvalidArgument if a literal is missing.
ActionSequence query_to_actions(const Query& q, const Schema& schema, const Grammar& grammar,
                                const std::vector<std::string>& candidates);
Query actions_to_query(const ActionSequence& actions, const Schema& schema, const Grammar& grammar,
                       const std::vector<std::string>& candidates);

/// Canonicalizes, then walks. Without explicit candidates the literals of
/// the query itself (query_literals order) are the candidate list.
ActionSequence sql_to_actions(std::string_view sql, const Schema& schema, const Grammar& grammar);
ActionSequence sql_to_actions(std::string_view sql, const Schema& schema, const Grammar& grammar,
                              const std::vector<std::string>& candidates);
std::string actions_to_sql(const ActionSequence& actions, const Schema& schema, const Grammar& grammar,
                           const std::vector<std::string>& candidates);

/// Order-insensitive comparison keys: identifiers lowercased, literals
/// normalized, subqueries keyed recursively.
std::string condition_signature(const Condition& c);
std::string item_signature(const SelectItem& it);
std::string query_signature(const Query& q);

/// Column names (lowercase) referenced anywhere in the query, sorted, unique.
std::vector<std::string> referenced_columns(const Query& q);

}  // namespace speechsql
