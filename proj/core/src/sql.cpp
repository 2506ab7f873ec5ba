#include "speechsql/sql.hpp"

#include "speechsql/error.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <deque>
#include <map>
#include <set>
#include <tuple>

namespace speechsql {

namespace {

// ---------------------------------------------------------------- tokens --

struct Token {
  enum class Type { kIdent, kNumber, kString, kSymbol, kEnd };
  Type type = Type::kEnd;
  std::string text;
};

bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto unary_minus_ok = [&] {
    if (out.empty()) return true;
    const Token& p = out.back();
    return p.type == Token::Type::kSymbol && p.text != ")";
  };
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '\'' || c == '"') {
      std::string text;
      std::size_t j = i + 1;
      bool closed = false;
      while (j < s.size()) {
        if (s[j] == c) {
          if (j + 1 < s.size() && s[j + 1] == c) {
            text += c;
            j += 2;
            continue;
          }
          closed = true;
          break;
        }
        text += s[j++];
      }
      if (!closed) throw Error(ErrorCode::kUnsupportedSql, "unterminated string literal");
      out.push_back({Token::Type::kString, text});
      i = j + 1;
      continue;
    }
    const bool neg = c == '-' && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])) &&
                     unary_minus_ok();
    if (std::isdigit(static_cast<unsigned char>(c)) || neg) {
      std::size_t j = i + 1;
      while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == '.')) ++j;
      if (j < s.size() && ident_char(s[j]))
        throw Error(ErrorCode::kUnsupportedSql, "malformed number near '" + std::string(s.substr(i, j - i + 1)) + "'");
      out.push_back({Token::Type::kNumber, std::string(s.substr(i, j - i))});
      i = j;
      continue;
    }
    if (ident_char(c) || c == '`') {
      if (c == '`') {
        const auto end = s.find('`', i + 1);
        if (end == std::string_view::npos) throw Error(ErrorCode::kUnsupportedSql, "unterminated quoted identifier");
        out.push_back({Token::Type::kIdent, std::string(s.substr(i + 1, end - i - 1))});
        i = end + 1;
        continue;
      }
      std::size_t j = i;
      while (j < s.size() && ident_char(s[j])) ++j;
      out.push_back({Token::Type::kIdent, std::string(s.substr(i, j - i))});
      i = j;
      continue;
    }
    static constexpr std::string_view two[] = {"!=", "<>", "<=", ">="};
    bool matched = false;
    for (auto t : two) {
      if (s.substr(i, 2) == t) {
        out.push_back({Token::Type::kSymbol, t == "<>" ? "!=" : std::string(t)});
        i += 2;
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (std::string_view("(),;.*=<>").find(c) != std::string_view::npos) {
      out.push_back({Token::Type::kSymbol, std::string(1, c)});
      ++i;
      continue;
    }
    throw Error(ErrorCode::kUnsupportedSql, std::string("unexpected character '") + c + "'");
  }
  out.push_back({Token::Type::kEnd, ""});
  return out;
}

const std::set<std::string>& reserved() {
  static const std::set<std::string> words = {
      "select", "from",  "where", "and",    "or",     "not",   "in",    "like",   "between", "order",
      "by",     "asc",   "desc",  "limit",  "join",   "on",    "as",    "group",  "having",  "union",
      "intersect", "except", "distinct", "max", "min", "count", "sum", "avg", "inner", "left", "right",
      "outer", "all", "is", "null", "exists", "case", "when"};
  return words;
}

std::optional<Aggregate> parse_aggregate(std::string_view word) {
  const std::string w = to_lower(word);
  if (w == "max") return Aggregate::kMax;
  if (w == "min") return Aggregate::kMin;
  if (w == "count") return Aggregate::kCount;
  if (w == "sum") return Aggregate::kSum;
  if (w == "avg") return Aggregate::kAvg;
  return std::nullopt;
}

// ---------------------------------------------------------------- parser --

struct RawColumn {
  std::string qualifier;
  std::string name;
};

struct RawItem {
  Aggregate agg = Aggregate::kNone;
  RawColumn col;
};

struct Scope {
  std::vector<std::pair<std::string, int>> names;  // alias or table name (lowercase) -> table
  std::vector<int> tables;
};

class Parser {
 public:
  Parser(std::string_view sql, const Schema& schema) : toks_(tokenize(sql)), schema_(schema) {}

  Query parse() {
    Query q = select_core(0);
    if (auto op = peek_set_op()) {
      ++pos_;
      q.set_op = *op;
      if (is_kw("all")) fail("UNION ALL is not supported");
      q.rhs = std::make_shared<Query>(select_core(0));
      if (peek_set_op()) fail("chained set operations are not supported");
    }
    if (is_sym(";")) ++pos_;
    if (peek().type != Token::Type::kEnd) fail("unexpected '" + peek().text + "'");
    return q;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw Error(ErrorCode::kUnsupportedSql, msg); }

  const Token& peek(std::size_t ahead = 0) const { return toks_[std::min(pos_ + ahead, toks_.size() - 1)]; }
  bool is_kw(std::string_view kw, std::size_t ahead = 0) const {
    const Token& t = peek(ahead);
    return t.type == Token::Type::kIdent && iequals(t.text, kw);
  }
  bool is_sym(std::string_view s, std::size_t ahead = 0) const {
    const Token& t = peek(ahead);
    return t.type == Token::Type::kSymbol && t.text == s;
  }
  void expect_kw(std::string_view kw) {
    if (!is_kw(kw)) fail("expected " + to_upper(kw) + " near '" + peek().text + "'");
    ++pos_;
  }
  void expect_sym(std::string_view s) {
    if (!is_sym(s)) fail("expected '" + std::string(s) + "' near '" + peek().text + "'");
    ++pos_;
  }
  static std::string to_upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
  }

  std::optional<SetOp> peek_set_op() const {
    if (is_kw("intersect")) return SetOp::kIntersect;
    if (is_kw("union")) return SetOp::kUnion;
    if (is_kw("except")) return SetOp::kExcept;
    return std::nullopt;
  }

  std::string identifier() {
    const Token& t = peek();
    if (t.type != Token::Type::kIdent) fail("expected identifier near '" + t.text + "'");
    if (reserved().count(to_lower(t.text))) fail("unexpected keyword " + to_upper(t.text));
    ++pos_;
    return t.text;
  }

  RawColumn raw_column() {
    if (is_sym("*")) fail("'*' is not supported");
    RawColumn c;
    c.name = identifier();
    if (is_sym(".")) {
      ++pos_;
      if (is_sym("*")) fail("'*' is not supported");
      c.qualifier = c.name;
      c.name = identifier();
    }
    return c;
  }

  RawItem raw_item() {
    RawItem item;
    if (peek().type == Token::Type::kIdent && is_sym("(", 1)) {
      auto agg = parse_aggregate(peek().text);
      if (!agg) fail("unsupported function " + peek().text);
      pos_ += 2;
      if (is_kw("distinct")) fail("DISTINCT inside aggregates is not supported");
      item.agg = *agg;
      item.col = raw_column();
      expect_sym(")");
      return item;
    }
    item.col = raw_column();
    return item;
  }

  ColumnRef resolve(const RawColumn& raw, const Scope& scope) const {
    if (!raw.qualifier.empty()) {
      const std::string q = to_lower(raw.qualifier);
      for (const auto& [name, t] : scope.names) {
        if (name != q) continue;
        const int c = schema_.column_index(t, raw.name);
        if (c < 0)
          throw Error(ErrorCode::kUnknownColumn,
                      "column " + raw.name + " not found in table " + schema_.tables[t].name);
        return {t, schema_.tables[t].columns[c].name};
      }
      throw Error(ErrorCode::kUnknownTable, "table or alias " + raw.qualifier + " is not in scope");
    }
    for (int t : scope.tables) {
      const int c = schema_.column_index(t, raw.name);
      if (c >= 0) return {t, schema_.tables[t].columns[c].name};
    }
    std::string tables;
    for (int t : scope.tables) tables += (tables.empty() ? "" : ", ") + schema_.tables[t].name;
    throw Error(ErrorCode::kUnknownColumn, "column " + raw.name + " not found in " + tables);
  }

  SelectItem item(const Scope& scope) {
    RawItem raw = raw_item();
    return {raw.agg, resolve(raw.col, scope)};
  }

  void table_ref(Scope& scope) {
    if (is_sym("(")) fail("subqueries in FROM are not supported");
    const std::string name = identifier();
    const int t = schema_.table_index(name);
    if (t < 0) throw Error(ErrorCode::kUnknownTable, "table " + name + " not in database " + schema_.db_id);
    scope.tables.push_back(t);
    scope.names.emplace_back(to_lower(name), t);
    if (is_kw("as")) {
      ++pos_;
      scope.names.emplace_back(to_lower(identifier()), t);
    } else if (peek().type == Token::Type::kIdent && !reserved().count(to_lower(peek().text))) {
      scope.names.emplace_back(to_lower(identifier()), t);
    }
  }

  Scope from_clause() {
    Scope scope;
    table_ref(scope);
    std::vector<std::pair<RawColumn, RawColumn>> on;
    for (;;) {
      if (is_sym(",")) {
        ++pos_;
        table_ref(scope);
        continue;
      }
      if (is_kw("inner") && is_kw("join", 1)) ++pos_;
      if (is_kw("left") || is_kw("right") || is_kw("outer")) fail("outer joins are not supported");
      if (!is_kw("join")) break;
      ++pos_;
      table_ref(scope);
      if (is_kw("on")) {
        ++pos_;
        for (;;) {
          RawColumn a = raw_column();
          expect_sym("=");
          RawColumn b = raw_column();
          on.emplace_back(a, b);
          if (is_kw("and") && peek(1).type == Token::Type::kIdent && (is_sym(".", 2) || is_sym("=", 2))) {
            ++pos_;
            continue;
          }
          break;
        }
      }
    }
    // Join keys are re-derived from foreign keys when rendering, but must
    // still name real columns.
    for (const auto& [a, b] : on) {
      resolve(a, scope);
      resolve(b, scope);
    }
    return scope;
  }

  std::string literal() {
    const Token& t = peek();
    if (t.type == Token::Type::kNumber || t.type == Token::Type::kString) {
      ++pos_;
      return t.text;
    }
    fail("expected a literal value near '" + t.text + "'");
  }

  std::shared_ptr<Query> subquery(int depth) {
    if (depth >= 1) fail("subqueries nested more than one level are not supported");
    expect_sym("(");
    auto q = std::make_shared<Query>(select_core(depth + 1));
    if (peek_set_op()) fail("set operations inside subqueries are not supported");
    expect_sym(")");
    return q;
  }

  Condition predicate(const Scope& scope, int depth) {
    Condition c;
    c.lhs = item(scope);
    if (is_kw("not")) {
      ++pos_;
      if (!is_kw("in")) fail("only NOT IN is supported after a column");
      ++pos_;
      c.kind = Condition::Kind::kSubquery;
      c.op = "not_in";
      c.subquery = subquery(depth);
      return c;
    }
    if (is_kw("in")) {
      ++pos_;
      c.kind = Condition::Kind::kSubquery;
      c.op = "in";
      c.subquery = subquery(depth);
      return c;
    }
    if (is_kw("like")) {
      ++pos_;
      c.kind = Condition::Kind::kLike;
      c.op = "like";
      c.values.push_back(literal());
      return c;
    }
    if (is_kw("between")) {
      ++pos_;
      c.kind = Condition::Kind::kBetween;
      c.op = "between";
      c.values.push_back(literal());
      expect_kw("and");
      c.values.push_back(literal());
      return c;
    }
    const Token& t = peek();
    static const std::set<std::string> ops = {"=", "!=", "<", ">", "<=", ">="};
    if (t.type != Token::Type::kSymbol || !ops.count(t.text)) fail("expected a comparison near '" + t.text + "'");
    c.op = t.text;
    ++pos_;
    if (is_sym("(") && is_kw("select", 1)) {
      if (c.op != "=" && c.op != ">" && c.op != "<") fail("subquery comparison " + c.op + " is not supported");
      c.kind = Condition::Kind::kSubquery;
      c.subquery = subquery(depth);
      return c;
    }
    if (peek().type == Token::Type::kIdent) fail("column-to-column comparisons are not supported");
    c.kind = Condition::Kind::kCompare;
    c.values.push_back(literal());
    return c;
  }

  Condition primary(const Scope& scope, int depth) {
    if (is_sym("(") && !is_kw("select", 1)) {
      ++pos_;
      Condition c = disjunction(scope, depth);
      expect_sym(")");
      return c;
    }
    return predicate(scope, depth);
  }

  Condition negation(const Scope& scope, int depth) {
    if (is_kw("not")) {
      ++pos_;
      Condition c;
      c.kind = Condition::Kind::kNot;
      c.children.push_back(negation(scope, depth));
      return c;
    }
    return primary(scope, depth);
  }

  Condition conjunction(const Scope& scope, int depth) {
    Condition left = negation(scope, depth);
    while (is_kw("and")) {
      ++pos_;
      Condition c;
      c.kind = Condition::Kind::kAnd;
      c.children.push_back(std::move(left));
      c.children.push_back(negation(scope, depth));
      left = std::move(c);
    }
    return left;
  }

  Condition disjunction(const Scope& scope, int depth) {
    Condition left = conjunction(scope, depth);
    while (is_kw("or")) {
      ++pos_;
      Condition c;
      c.kind = Condition::Kind::kOr;
      c.children.push_back(std::move(left));
      c.children.push_back(conjunction(scope, depth));
      left = std::move(c);
    }
    return left;
  }

  Query select_core(int depth) {
    expect_kw("select");
    if (is_kw("distinct")) fail("DISTINCT is not supported");
    std::vector<RawItem> raw;
    raw.push_back(raw_item());
    while (is_sym(",")) {
      ++pos_;
      raw.push_back(raw_item());
    }
    expect_kw("from");
    Scope scope = from_clause();
    Query q;
    q.from_tables = scope.tables;
    for (const auto& r : raw) q.select.push_back({r.agg, resolve(r.col, scope)});
    if (is_kw("where")) {
      ++pos_;
      q.where = disjunction(scope, depth);
    }
    if (is_kw("group") || is_kw("having")) fail("GROUP BY / HAVING are not supported");
    if (is_kw("order")) {
      ++pos_;
      expect_kw("by");
      OrderClause o;
      o.item = item(scope);
      if (is_kw("desc")) {
        o.descending = true;
        ++pos_;
      } else if (is_kw("asc")) {
        ++pos_;
      }
      if (is_sym(",")) fail("ORDER BY with several keys is not supported");
      q.order = std::move(o);
    }
    if (is_kw("limit")) {
      ++pos_;
      if (!q.order) fail("LIMIT without ORDER BY is not supported");
      if (peek().type != Token::Type::kNumber) fail("LIMIT expects a number");
      q.order->limit = peek().text;
      ++pos_;
    }
    return q;
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
  const Schema& schema_;
};

// ------------------------------------------------------- canonical keys --

std::string item_key(const SelectItem& it) {
  return std::string(aggregate_keyword(it.agg)) + "(" + std::to_string(it.col.table) + "." + to_lower(it.col.column) +
         ")";
}

std::string query_key(const Query& q);

std::string condition_key(const Condition& c) {
  switch (c.kind) {
    case Condition::Kind::kAnd:
    case Condition::Kind::kOr: {
      std::string out = c.kind == Condition::Kind::kAnd ? "and(" : "or(";
      for (const auto& ch : c.children) out += condition_key(ch) + ",";
      return out + ")";
    }
    case Condition::Kind::kNot:
      return "not(" + condition_key(c.children.at(0)) + ")";
    case Condition::Kind::kSubquery:
      return item_key(c.lhs) + " " + c.op + " {" + query_key(*c.subquery) + "}";
    default: {
      std::string out = item_key(c.lhs) + " " + c.op;
      for (const auto& v : c.values) out += " " + normalize_literal(v);
      return out;
    }
  }
}

std::string query_key(const Query& q) {
  std::string out = "select";
  for (const auto& it : q.select) out += " " + item_key(it);
  if (q.where) out += " where " + condition_key(*q.where);
  if (q.order)
    out += std::string(" order ") + (q.order->descending ? "desc " : "asc ") + item_key(q.order->item) +
           (q.order->limit ? " limit " + normalize_literal(*q.order->limit) : "");
  if (q.set_op != SetOp::kNone) out += " setop" + std::to_string(static_cast<int>(q.set_op)) + " " + query_key(*q.rhs);
  return out;
}

void flatten(const Condition& c, Condition::Kind kind, std::vector<Condition>& out) {
  if (c.kind == kind) {
    for (const auto& ch : c.children) flatten(ch, kind, out);
  } else {
    out.push_back(c);
  }
}

std::string sort_column(const Condition& c) {
  const bool leaf = c.kind != Condition::Kind::kAnd && c.kind != Condition::Kind::kOr && c.kind != Condition::Kind::kNot;
  return leaf ? to_lower(c.lhs.col.column) : std::string("\x7f");
}

Condition canonical_condition(const Condition& c) {
  Condition out = c;
  switch (c.kind) {
    case Condition::Kind::kAnd:
    case Condition::Kind::kOr: {
      std::vector<Condition> members;
      flatten(c, c.kind, members);
      for (auto& m : members) m = canonical_condition(m);
      std::stable_sort(members.begin(), members.end(), [](const Condition& a, const Condition& b) {
        return std::forward_as_tuple(sort_column(a), a.op, condition_key(a)) <
               std::forward_as_tuple(sort_column(b), b.op, condition_key(b));
      });
      Condition tail = std::move(members.back());
      for (std::size_t i = members.size() - 1; i-- > 0;) {
        Condition node;
        node.kind = c.kind;
        node.children.push_back(std::move(members[i]));
        node.children.push_back(std::move(tail));
        tail = std::move(node);
      }
      return tail;
    }
    case Condition::Kind::kNot:
      out.children = {canonical_condition(c.children.at(0))};
      return out;
    case Condition::Kind::kSubquery:
      out.subquery = std::make_shared<Query>(canonicalize(*c.subquery));
      return out;
    default:
      return out;
  }
}

// ------------------------------------------------------------- render --

std::string quote_literal(const std::string& v) {
  if (is_numeric_literal(v)) return v;
  std::string out = "'";
  for (char ch : v) {
    out += ch;
    if (ch == '\'') out += '\'';
  }
  return out + "'";
}

std::string upper_agg(Aggregate a) {
  switch (a) {
    case Aggregate::kMax: return "MAX";
    case Aggregate::kMin: return "MIN";
    case Aggregate::kCount: return "COUNT";
    case Aggregate::kSum: return "SUM";
    case Aggregate::kAvg: return "AVG";
    default: return "";
  }
}

struct JoinStep {
  int table = -1;
  std::optional<ForeignKey> on;
};

class Renderer {
 public:
  explicit Renderer(const Schema& schema) : schema_(schema) {}

  std::string query(const Query& q) {
    std::string out = core(q);
    if (q.set_op != SetOp::kNone) {
      static const char* names[] = {"", " INTERSECT ", " UNION ", " EXCEPT "};
      out += names[static_cast<int>(q.set_op)] + core(*q.rhs);
    }
    return out;
  }

 private:
  void collect_tables(const Condition& c, std::vector<int>& tables) const {
    if (c.kind == Condition::Kind::kAnd || c.kind == Condition::Kind::kOr || c.kind == Condition::Kind::kNot) {
      for (const auto& ch : c.children) collect_tables(ch, tables);
      return;
    }
    add_table(c.lhs.col.table, tables);
  }
  static void add_table(int t, std::vector<int>& tables) {
    if (std::find(tables.begin(), tables.end(), t) == tables.end()) tables.push_back(t);
  }

  std::vector<JoinStep> plan_joins(const std::vector<int>& tables) const {
    std::vector<JoinStep> steps{{tables.front(), std::nullopt}};
    std::vector<bool> in(schema_.tables.size(), false);
    in[tables.front()] = true;
    for (std::size_t k = 1; k < tables.size(); ++k) {
      const int target = tables[k];
      if (in[target]) continue;
      // BFS from every joined table toward target over foreign-key edges.
      std::vector<int> parent(schema_.tables.size(), -2);
      std::vector<int> via(schema_.tables.size(), -1);
      std::deque<int> frontier;
      for (const auto& s : steps) {
        parent[s.table] = -1;
        frontier.push_back(s.table);
      }
      while (!frontier.empty() && parent[target] == -2) {
        const int u = frontier.front();
        frontier.pop_front();
        for (std::size_t f = 0; f < schema_.foreign_keys.size(); ++f) {
          const auto& fk = schema_.foreign_keys[f];
          const int a = schema_.table_index(fk.src_table);
          const int b = schema_.table_index(fk.dst_table);
          if (a == b) continue;
          const int v = a == u ? b : (b == u ? a : -1);
          if (v < 0 || parent[v] != -2) continue;
          parent[v] = u;
          via[v] = static_cast<int>(f);
          frontier.push_back(v);
        }
      }
      if (parent[target] == -2) {
        steps.push_back({target, std::nullopt});
        in[target] = true;
        continue;
      }
      std::vector<int> path;
      for (int v = target; parent[v] != -1; v = parent[v]) path.push_back(v);
      for (auto it = path.rbegin(); it != path.rend(); ++it) {
        steps.push_back({*it, schema_.foreign_keys[via[*it]]});
        in[*it] = true;
      }
    }
    return steps;
  }

  std::string column(const ColumnRef& c) const {
    if (alias_.empty()) return c.column;
    return alias_.at(c.table) + "." + c.column;
  }

  std::string item(const SelectItem& it) const {
    if (it.agg == Aggregate::kNone) return column(it.col);
    return upper_agg(it.agg) + "(" + column(it.col) + ")";
  }

  std::string condition(const Condition& c, Condition::Kind parent) {
    switch (c.kind) {
      case Condition::Kind::kAnd:
      case Condition::Kind::kOr: {
        const char* sep = c.kind == Condition::Kind::kAnd ? " AND " : " OR ";
        std::string out;
        for (const auto& ch : c.children) out += (out.empty() ? "" : sep) + condition(ch, c.kind);
        const bool wrap = parent == Condition::Kind::kNot ||
                          (parent != c.kind && (parent == Condition::Kind::kAnd || parent == Condition::Kind::kOr));
        return wrap ? "(" + out + ")" : out;
      }
      case Condition::Kind::kNot: {
        std::string inner = condition(c.children.at(0), Condition::Kind::kNot);
        if (inner.front() != '(') inner = "(" + inner + ")";
        return "NOT " + inner;
      }
      case Condition::Kind::kLike:
        return item(c.lhs) + " LIKE " + quote_literal(c.values.at(0));
      case Condition::Kind::kBetween:
        return item(c.lhs) + " BETWEEN " + quote_literal(c.values.at(0)) + " AND " + quote_literal(c.values.at(1));
      case Condition::Kind::kSubquery: {
        Renderer sub(schema_);
        const std::string op = c.op == "in" ? "IN" : (c.op == "not_in" ? "NOT IN" : c.op);
        return item(c.lhs) + " " + op + " (" + sub.query(*c.subquery) + ")";
      }
      case Condition::Kind::kCompare:
        return item(c.lhs) + " " + c.op + " " + quote_literal(c.values.at(0));
    }
    return "";
  }

  std::string core(const Query& q) {
    std::vector<int> tables;
    for (const auto& it : q.select) add_table(it.col.table, tables);
    if (q.where) collect_tables(*q.where, tables);
    if (q.order) add_table(q.order->item.col.table, tables);
    const auto steps = plan_joins(tables);
    alias_.clear();
    std::string from = " FROM ";
    if (steps.size() == 1) {
      from += schema_.tables[steps[0].table].name;
    } else {
      for (std::size_t i = 0; i < steps.size(); ++i) alias_[steps[i].table] = "T" + std::to_string(i + 1);
      for (std::size_t i = 0; i < steps.size(); ++i) {
        const int t = steps[i].table;
        if (i > 0) from += " JOIN ";
        from += schema_.tables[t].name + " AS " + alias_[t];
        if (const auto& fk = steps[i].on) {
          const int a = schema_.table_index(fk->src_table);
          const int b = schema_.table_index(fk->dst_table);
          const int sa = schema_.column_index(a, fk->src_column);
          const int sb = schema_.column_index(b, fk->dst_column);
          from += " ON " + alias_[a] + "." + schema_.tables[a].columns[sa].name + " = " + alias_[b] + "." +
                  schema_.tables[b].columns[sb].name;
        }
      }
    }
    std::string out = "SELECT ";
    for (std::size_t i = 0; i < q.select.size(); ++i) out += (i ? ", " : "") + item(q.select[i]);
    out += from;
    if (q.where) out += " WHERE " + condition(*q.where, Condition::Kind::kCompare);
    if (q.order) {
      out += " ORDER BY " + item(q.order->item) + (q.order->descending ? " DESC" : " ASC");
      if (q.order->limit) out += " LIMIT " + *q.order->limit;
    }
    return out;
  }

  const Schema& schema_;
  std::map<int, std::string> alias_;
};

// --------------------------------------------------------- SemQL walk --

class ActionWriter {
 public:
  ActionWriter(const Schema& schema, const Grammar& grammar, const std::vector<std::string>& candidates)
      : schema_(schema), grammar_(grammar), catalog_(schema) {
    for (const auto& c : candidates) normalized_.push_back(normalize_literal(c));
  }

  ActionSequence run(const Query& q) {
    if (q.set_op == SetOp::kNone) {
      rule(NonTerminal::kZ, "R");
      r(q);
    } else {
      static const char* names[] = {"", "R intersect R", "R union R", "R except R"};
      rule(NonTerminal::kZ, names[static_cast<int>(q.set_op)]);
      r(q);
      if (q.rhs->set_op != SetOp::kNone) throw Error(ErrorCode::kUnsupportedSql, "chained set operations");
      r(*q.rhs);
    }
    return std::move(out_);
  }

 private:
  void rule(NonTerminal lhs, const std::string& rhs) {
    const int id = grammar_.find(lhs, rhs);
    if (id < 0)
      throw Error(ErrorCode::kUnsupportedSql,
                  "grammar has no production " + std::string(nonterminal_name(lhs)) + " := " + rhs);
    out_.push_back(Action::rule(id));
  }

  void value(const std::string& v) {
    const std::string n = normalize_literal(v);
    for (std::size_t i = 0; i < normalized_.size(); ++i)
      if (normalized_[i] == n) {
        out_.push_back(Action::value(static_cast<int>(i)));
        return;
      }
    throw Error(ErrorCode::kInvalidArgument, "literal " + v + " is not among the candidate values");
  }

  void a(const SelectItem& it) {
    rule(NonTerminal::kA, std::string(aggregate_keyword(it.agg)) + " C T");
    const int c = catalog_.find_column(it.col.column);
    if (c < 0) throw Error(ErrorCode::kUnknownColumn, it.col.column);
    out_.push_back(Action::column(c));
    out_.push_back(Action::table(it.col.table));
  }

  void r(const Query& q) {
    std::string rhs = "Select";
    if (q.where) rhs += " Filter";
    if (q.order) rhs += " Order";
    rule(NonTerminal::kR, rhs);
    if (q.select.empty() || q.select.size() > 3)
      throw Error(ErrorCode::kUnsupportedSql, "SELECT lists of 1 to 3 items are supported");
    std::string sel = "A";
    for (std::size_t i = 1; i < q.select.size(); ++i) sel += " A";
    rule(NonTerminal::kSelect, sel);
    for (const auto& it : q.select) a(it);
    if (q.where) filter(*q.where);
    if (q.order) {
      std::string o = q.order->descending ? "desc A" : "asc A";
      if (q.order->limit) o += " limit V";
      rule(NonTerminal::kOrder, o);
      a(q.order->item);
      if (q.order->limit) value(*q.order->limit);
    }
  }

  void chain(Condition::Kind kind, const std::vector<Condition>& members, std::size_t from) {
    if (from + 1 == members.size()) {
      filter(members[from]);
      return;
    }
    rule(NonTerminal::kFilter, kind == Condition::Kind::kAnd ? "and Filter Filter" : "or Filter Filter");
    filter(members[from]);
    chain(kind, members, from + 1);
  }

  void filter(const Condition& c) {
    switch (c.kind) {
      case Condition::Kind::kAnd:
      case Condition::Kind::kOr:
        if (c.children.size() < 2) throw Error(ErrorCode::kUnsupportedSql, "degenerate boolean connective");
        chain(c.kind, c.children, 0);
        return;
      case Condition::Kind::kNot:
        rule(NonTerminal::kFilter, "not Filter");
        filter(c.children.at(0));
        return;
      case Condition::Kind::kCompare:
        rule(NonTerminal::kFilter, c.op + " A V");
        a(c.lhs);
        value(c.values.at(0));
        return;
      case Condition::Kind::kLike:
        rule(NonTerminal::kFilter, "like A V");
        a(c.lhs);
        value(c.values.at(0));
        return;
      case Condition::Kind::kBetween:
        rule(NonTerminal::kFilter, "between A V V");
        a(c.lhs);
        value(c.values.at(0));
        value(c.values.at(1));
        return;
      case Condition::Kind::kSubquery:
        rule(NonTerminal::kFilter, c.op + " A R");
        a(c.lhs);
        if (c.subquery->set_op != SetOp::kNone)
          throw Error(ErrorCode::kUnsupportedSql, "set operations inside subqueries");
        r(*c.subquery);
        return;
    }
  }

  const Schema& schema_;
  const Grammar& grammar_;
  SchemaCatalog catalog_;
  std::vector<std::string> normalized_;
  ActionSequence out_;
};

class TreeReader {
 public:
  TreeReader(const Schema& schema, const Grammar& grammar, const std::vector<std::string>& candidates)
      : schema_(schema), grammar_(grammar), catalog_(schema), candidates_(candidates) {}

  Query z(const SemQLTree& t) {
    const auto kw = keywords(t);
    Query q = r(t.children.at(0));
    if (t.children.size() == 2) {
      if (kw.empty()) fail(t);
      if (kw[0] == "intersect") q.set_op = SetOp::kIntersect;
      else if (kw[0] == "union") q.set_op = SetOp::kUnion;
      else if (kw[0] == "except") q.set_op = SetOp::kExcept;
      else fail(t);
      q.rhs = std::make_shared<Query>(r(t.children[1]));
    }
    return q;
  }

 private:
  [[noreturn]] void fail(const SemQLTree& t) const {
    throw Error(ErrorCode::kUnsupportedSql, "cannot render production " + grammar_.rule(t.rule).text());
  }

  std::vector<std::string> keywords(const SemQLTree& t) const {
    std::vector<std::string> out;
    for (const auto& s : grammar_.rule(t.rule).rhs)
      if (!s.nonterminal) out.push_back(s.keyword);
    return out;
  }

  const std::string& value(const SemQLTree& t) const { return candidates_.at(t.selection); }

  SelectItem a(const SemQLTree& t) const {
    const auto kw = keywords(t);
    SelectItem it;
    if (kw.size() != 1) fail(t);
    if (kw[0] == "none") it.agg = Aggregate::kNone;
    else if (auto agg = parse_aggregate(kw[0])) it.agg = *agg;
    else fail(t);
    const int c = t.children.at(0).selection;
    const int table = t.children.at(1).selection;
    it.col.table = table;
    const int ci = schema_.column_index(table, catalog_.column_name(c));
    it.col.column = schema_.tables[table].columns.at(ci).name;
    return it;
  }

  Query r(const SemQLTree& t) {
    Query q;
    for (const auto& ch : t.children) {
      switch (ch.symbol) {
        case NonTerminal::kSelect:
          for (const auto& item : ch.children) q.select.push_back(a(item));
          break;
        case NonTerminal::kFilter:
          q.where = filter(ch);
          break;
        case NonTerminal::kOrder: {
          const auto kw = keywords(ch);
          OrderClause o;
          if (kw.empty() || (kw[0] != "asc" && kw[0] != "desc")) fail(ch);
          o.descending = kw[0] == "desc";
          o.item = a(ch.children.at(0));
          if (ch.children.size() > 1) o.limit = value(ch.children[1]);
          q.order = std::move(o);
          break;
        }
        default:
          fail(t);
      }
    }
    for (const auto& it : q.select)
      if (std::find(q.from_tables.begin(), q.from_tables.end(), it.col.table) == q.from_tables.end())
        q.from_tables.push_back(it.col.table);
    return q;
  }

  Condition filter(const SemQLTree& t) {
    const auto kw = keywords(t);
    if (kw.empty()) fail(t);
    Condition c;
    const std::string& head = kw[0];
    if (head == "and" || head == "or") {
      c.kind = head == "and" ? Condition::Kind::kAnd : Condition::Kind::kOr;
      for (const auto& ch : t.children) c.children.push_back(filter(ch));
      return c;
    }
    if (head == "not") {
      c.kind = Condition::Kind::kNot;
      c.children.push_back(filter(t.children.at(0)));
      return c;
    }
    c.op = head;
    c.lhs = a(t.children.at(0));
    const SemQLTree& rest = t.children.at(1);
    if (rest.symbol == NonTerminal::kR) {
      c.kind = Condition::Kind::kSubquery;
      c.subquery = std::make_shared<Query>(r(rest));
      return c;
    }
    c.kind = head == "like" ? Condition::Kind::kLike
                            : (head == "between" ? Condition::Kind::kBetween : Condition::Kind::kCompare);
    for (std::size_t i = 1; i < t.children.size(); ++i) c.values.push_back(value(t.children[i]));
    return c;
  }

  const Schema& schema_;
  const Grammar& grammar_;
  SchemaCatalog catalog_;
  const std::vector<std::string>& candidates_;
};

void walk_literals(const Query& q, std::vector<std::string>& out, std::set<std::string>& seen);

void walk_literals(const Condition& c, std::vector<std::string>& out, std::set<std::string>& seen) {
  for (const auto& ch : c.children) walk_literals(ch, out, seen);
  for (const auto& v : c.values)
    if (seen.insert(normalize_literal(v)).second) out.push_back(v);
  if (c.subquery) walk_literals(*c.subquery, out, seen);
}

void walk_literals(const Query& q, std::vector<std::string>& out, std::set<std::string>& seen) {
  if (q.where) walk_literals(*q.where, out, seen);
  if (q.order && q.order->limit && seen.insert(normalize_literal(*q.order->limit)).second)
    out.push_back(*q.order->limit);
  if (q.rhs) walk_literals(*q.rhs, out, seen);
}

void walk_columns(const Query& q, std::set<std::string>& out);

void walk_columns(const Condition& c, std::set<std::string>& out) {
  for (const auto& ch : c.children) walk_columns(ch, out);
  if (!c.lhs.col.column.empty()) out.insert(to_lower(c.lhs.col.column));
  if (c.subquery) walk_columns(*c.subquery, out);
}

void walk_columns(const Query& q, std::set<std::string>& out) {
  for (const auto& it : q.select) out.insert(to_lower(it.col.column));
  if (q.where) walk_columns(*q.where, out);
  if (q.order) out.insert(to_lower(q.order->item.col.column));
  if (q.rhs) walk_columns(*q.rhs, out);
}

}  // namespace

std::string_view aggregate_keyword(Aggregate a) {
  switch (a) {
    case Aggregate::kNone: return "none";
    case Aggregate::kMax: return "max";
    case Aggregate::kMin: return "min";
    case Aggregate::kCount: return "count";
    case Aggregate::kSum: return "sum";
    case Aggregate::kAvg: return "avg";
  }
  return "none";
}

bool is_numeric_literal(std::string_view literal) {
  if (literal.empty()) return false;
  double v = 0;
  const char* first = literal.data();
  const char* last = first + literal.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  return ec == std::errc() && ptr == last;
}

std::string normalize_literal(std::string_view literal) {
  std::string_view s = literal;
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.size() >= 2 && (s.front() == '\'' || s.front() == '"') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  if (is_numeric_literal(s)) {
    double v = 0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.15g", v == 0 ? 0.0 : v);
    return buf;
  }
  return std::string(s);
}

Query parse_sql(std::string_view sql, const Schema& schema) { return Parser(sql, schema).parse(); }

Query canonicalize(const Query& q) {
  Query out = q;
  if (q.where) out.where = canonical_condition(*q.where);
  if (q.rhs) out.rhs = std::make_shared<Query>(canonicalize(*q.rhs));
  return out;
}

std::string render_sql(const Query& q, const Schema& schema) { return Renderer(schema).query(q); }

std::vector<std::string> query_literals(const Query& q) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  walk_literals(canonicalize(q), out, seen);
  return out;
}

std::string condition_signature(const Condition& c) { return condition_key(canonical_condition(c)); }
std::string item_signature(const SelectItem& it) { return item_key(it); }
std::string query_signature(const Query& q) { return query_key(canonicalize(q)); }

std::vector<std::string> referenced_columns(const Query& q) {
  std::set<std::string> cols;
  walk_columns(q, cols);
  return {cols.begin(), cols.end()};
}

ActionSequence query_to_actions(const Query& q, const Schema& schema, const Grammar& grammar,
                                const std::vector<std::string>& candidates) {
  return ActionWriter(schema, grammar, candidates).run(canonicalize(q));
}

Query actions_to_query(const ActionSequence& actions, const Schema& schema, const Grammar& grammar,
                       const std::vector<std::string>& candidates) {
  const SchemaCatalog catalog(schema);
  const SemQLTree tree = build_tree(actions, grammar, catalog, static_cast<int>(candidates.size()));
  return TreeReader(schema, grammar, candidates).z(tree);
}

ActionSequence sql_to_actions(std::string_view sql, const Schema& schema, const Grammar& grammar) {
  const Query q = parse_sql(sql, schema);
  return query_to_actions(q, schema, grammar, query_literals(q));
}

ActionSequence sql_to_actions(std::string_view sql, const Schema& schema, const Grammar& grammar,
                              const std::vector<std::string>& candidates) {
  return query_to_actions(parse_sql(sql, schema), schema, grammar, candidates);
}

std::string actions_to_sql(const ActionSequence& actions, const Schema& schema, const Grammar& grammar,
                           const std::vector<std::string>& candidates) {
  return render_sql(actions_to_query(actions, schema, grammar, candidates), schema);
}

}  // namespace speechsql
