#include "speechsql/eval.hpp"

#include "speechsql/error.hpp"
#include "speechsql/sql.hpp"

#include <algorithm>
#include <sstream>

namespace speechsql {

namespace {

std::vector<std::string> conjuncts(const Query& q) {
  std::vector<std::string> out;
  if (!q.where) return out;
  std::vector<const Condition*> stack{&*q.where};
  while (!stack.empty()) {
    const Condition* c = stack.back();
    stack.pop_back();
    if (c->kind == Condition::Kind::kAnd) {
      for (const auto& ch : c->children) stack.push_back(&ch);
    } else {
      out.push_back(condition_signature(*c));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string order_key(const Query& q) {
  if (!q.order) return "";
  return std::string(q.order->descending ? "desc " : "asc ") + item_signature(q.order->item) +
         (q.order->limit ? " " + normalize_literal(*q.order->limit) : "");
}

MatchReport compare(const Query& p, const Query& g) {
  MatchReport r;
  auto columns = [](const Query& q) {
    std::vector<std::pair<int, std::string>> out;
    for (const auto& it : q.select) out.emplace_back(it.col.table, to_lower(it.col.column));
    return out;
  };
  auto aggs = [](const Query& q) {
    std::vector<Aggregate> out;
    for (const auto& it : q.select) out.push_back(it.agg);
    return out;
  };
  r.parts.select_columns = columns(p) == columns(g);
  r.parts.aggregators = aggs(p) == aggs(g);
  r.parts.conditions = conjuncts(p) == conjuncts(g);
  bool structure = p.set_op == g.set_op && order_key(p) == order_key(g);
  if (structure && p.rhs && g.rhs) structure = compare(*p.rhs, *g.rhs).exact;
  r.parts.structure = structure;
  r.exact = r.parts.select_columns && r.parts.aggregators && r.parts.conditions && r.parts.structure;
  return r;
}

}  // namespace

MatchReport query_match(std::string_view pred_sql, std::string_view gold_sql, const Schema& schema) {
  Query p, g;
  try {
    p = canonicalize(parse_sql(pred_sql, schema));
    g = canonicalize(parse_sql(gold_sql, schema));
  } catch (const Error&) {
    return {};
  }
  return compare(p, g);
}

WERReport wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (ref.empty()) throw Error(ErrorCode::kEmptyReference, "reference has no words");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1), d[i - 1][j] + 1, d[i][j - 1] + 1});
  WERReport r;
  r.reference_length = static_cast<int>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++r.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++r.deletions;
      --i;
    } else {
      ++r.insertions;
      --j;
    }
  }
  r.wer = static_cast<double>(d[n][m]) / static_cast<double>(n);
  return r;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(to_lower(w));
  return out;
}

}  // namespace speechsql
