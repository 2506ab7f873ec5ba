#include "speechsql/semql.hpp"

#include "speechsql/error.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <sstream>

namespace speechsql {

namespace {

constexpr std::string_view kNames[kNumNonTerminals] = {"Z", "R", "Select", "Order", "A", "Filter", "C", "T", "V"};
constexpr int kInfinity = std::numeric_limits<int>::max() / 4;

constexpr std::string_view kDefaultGrammar = R"(# SemQL grammar, one production per line.
Z := R
Z := R intersect R
Z := R union R
Z := R except R
R := Select
R := Select Filter
R := Select Order
R := Select Filter Order
Select := A
Select := A A
Select := A A A
Order := asc A
Order := desc A
Order := asc A limit V
Order := desc A limit V
A := none C T
A := max C T
A := min C T
A := count C T
A := sum C T
A := avg C T
Filter := and Filter Filter
Filter := or Filter Filter
Filter := not Filter
Filter := = A V
Filter := != A V
Filter := < A V
Filter := > A V
Filter := <= A V
Filter := >= A V
Filter := like A V
Filter := between A V V
Filter := = A R
Filter := > A R
Filter := < A R
Filter := in A R
Filter := not_in A R
)";

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

std::string_view nonterminal_name(NonTerminal nt) { return kNames[static_cast<int>(nt)]; }

std::optional<NonTerminal> parse_nonterminal(std::string_view name) {
  for (int i = 0; i < kNumNonTerminals; ++i)
    if (kNames[i] == name) return static_cast<NonTerminal>(i);
  return std::nullopt;
}

std::string GrammarSymbol::text() const { return nonterminal ? std::string(nonterminal_name(nt)) : keyword; }

std::vector<NonTerminal> Production::children() const {
  std::vector<NonTerminal> out;
  for (const auto& s : rhs)
    if (s.nonterminal) out.push_back(s.nt);
  return out;
}

std::string Production::text() const {
  std::string out(nonterminal_name(lhs));
  out += " :=";
  for (const auto& s : rhs) out += " " + s.text();
  return out;
}

Grammar::Grammar(std::vector<Production> productions) : productions_(std::move(productions)) {
  for (std::size_t i = 0; i < productions_.size(); ++i) {
    productions_[i].id = static_cast<int>(i);
    by_lhs_[static_cast<int>(productions_[i].lhs)].push_back(static_cast<int>(i));
  }
  for (int i = 0; i < kNumNonTerminals; ++i)
    min_cost_[i] = is_selection_slot(static_cast<NonTerminal>(i)) ? 1 : kInfinity;
  rule_cost_.assign(productions_.size(), kInfinity);
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& p : productions_) {
      long cost = 1;
      for (NonTerminal c : p.children()) cost += min_cost_[static_cast<int>(c)];
      const int c = static_cast<int>(std::min<long>(cost, kInfinity));
      rule_cost_[p.id] = c;
      int& best = min_cost_[static_cast<int>(p.lhs)];
      if (c < best) {
        best = c;
        changed = true;
      }
    }
  }
}

int Grammar::find(NonTerminal lhs, std::string_view rhs) const {
  for (int id : rules_for(lhs)) {
    std::string text;
    for (const auto& s : productions_[id].rhs) {
      if (!text.empty()) text += ' ';
      text += s.text();
    }
    if (text == rhs) return id;
  }
  return -1;
}

Grammar load_grammar(std::string_view spec_text) {
  std::vector<Production> prods;
  std::istringstream is{std::string(spec_text)};
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto words = split_ws(line);
    if (words.empty()) continue;
    if (words.size() < 3 || words[1] != ":=")
      throw Error(ErrorCode::kUnknownSymbol, "line " + std::to_string(line_no) + ": expected 'LHS := symbols'");
    auto lhs = parse_nonterminal(words[0]);
    if (!lhs) throw Error(ErrorCode::kUnknownSymbol, "line " + std::to_string(line_no) + ": unknown nonterminal " + words[0]);
    if (is_selection_slot(*lhs))
      throw Error(ErrorCode::kUnknownSymbol, "line " + std::to_string(line_no) + ": " + words[0] + " is a selection slot");
    Production p;
    p.lhs = *lhs;
    for (std::size_t i = 2; i < words.size(); ++i) {
      GrammarSymbol sym;
      if (auto nt = parse_nonterminal(words[i])) {
        sym.nonterminal = true;
        sym.nt = *nt;
      } else if (std::isupper(static_cast<unsigned char>(words[i][0]))) {
        throw Error(ErrorCode::kUnknownSymbol, "line " + std::to_string(line_no) + ": undefined symbol " + words[i]);
      } else {
        sym.keyword = words[i];
      }
      p.rhs.push_back(std::move(sym));
    }
    prods.push_back(std::move(p));
  }
  if (prods.empty()) throw Error(ErrorCode::kEmptyGrammar, "no productions");
  Grammar g(std::move(prods));
  if (g.rules_for(NonTerminal::kZ).empty()) throw Error(ErrorCode::kEmptyGrammar, "start symbol Z has no productions");
  for (const auto& p : g.productions())
    for (NonTerminal c : p.children())
      if (!is_selection_slot(c) && g.rules_for(c).empty())
        throw Error(ErrorCode::kEmptyGrammar, std::string(nonterminal_name(c)) + " has no productions");
  return g;
}

std::string_view default_grammar_text() { return kDefaultGrammar; }

const Grammar& default_grammar() {
  static const Grammar g = load_grammar(kDefaultGrammar);
  return g;
}

std::string format_action(const Action& a, const Grammar& g, const SchemaCatalog* catalog,
                          const std::vector<std::string>* candidates) {
  switch (a.kind) {
    case ActionKind::kApplyRule:
      return a.index >= 0 && a.index < g.n_rules() ? g.rule(a.index).text() : "rule#" + std::to_string(a.index);
    case ActionKind::kSelectColumn:
      return "C:" + (catalog && a.index >= 0 && a.index < catalog->n_columns() ? catalog->column_name(a.index)
                                                                             : std::to_string(a.index));
    case ActionKind::kSelectTable:
      return "T:" + (catalog && a.index >= 0 && a.index < catalog->n_tables() ? catalog->table_name(a.index)
                                                                            : std::to_string(a.index));
    case ActionKind::kSelectValue:
      return "V:" + (candidates && a.index >= 0 && a.index < static_cast<int>(candidates->size())
                         ? (*candidates)[a.index]
                         : std::to_string(a.index));
  }
  return "?";
}

int ActionSpace::offset(ActionKind k) const {
  switch (k) {
    case ActionKind::kApplyRule: return 0;
    case ActionKind::kSelectColumn: return n_rules;
    case ActionKind::kSelectTable: return n_rules + n_columns;
    case ActionKind::kSelectValue: return n_rules + n_columns + n_tables;
  }
  return 0;
}

Action ActionSpace::unflat(int i) const {
  if (i < n_rules) return Action::rule(i);
  i -= n_rules;
  if (i < n_columns) return Action::column(i);
  i -= n_columns;
  if (i < n_tables) return Action::table(i);
  return Action::value(i - n_tables);
}

DerivationState::DerivationState(const Grammar& grammar, int max_steps)
    : grammar_(&grammar), max_steps_(max_steps) {
  stack_.push_back(NonTerminal::kZ);
  pending_cost_ = grammar.min_cost(NonTerminal::kZ);
}

std::optional<NonTerminal> DerivationState::frontier() const {
  if (stack_.empty()) return std::nullopt;
  return stack_.back();
}

bool DerivationState::rule_fits_budget(int rule) const {
  if (max_steps_ <= 0 || stack_.empty()) return true;
  const NonTerminal x = stack_.back();
  const long after = static_cast<long>(steps()) + 1 + pending_cost_ - grammar_->min_cost(x) +
                     (grammar_->rule_cost(rule) - 1);
  return after <= max_steps_;
}

bool is_legal(const DerivationState& state, const Action& a, const SchemaCatalog& catalog, int n_candidates) {
  const auto f = state.frontier();
  if (!f) return false;
  switch (a.kind) {
    case ActionKind::kApplyRule: {
      const Grammar& g = state.grammar();
      if (is_selection_slot(*f) || a.index < 0 || a.index >= g.n_rules()) return false;
      return g.rule(a.index).lhs == *f && state.rule_fits_budget(a.index);
    }
    case ActionKind::kSelectColumn:
      return *f == NonTerminal::kC && a.index >= 0 && a.index < catalog.n_columns();
    case ActionKind::kSelectTable:
      if (*f != NonTerminal::kT || a.index < 0 || a.index >= catalog.n_tables()) return false;
      return state.last_column() < 0 || catalog.table_has(a.index, state.last_column());
    case ActionKind::kSelectValue:
      return *f == NonTerminal::kV && a.index >= 0 && a.index < n_candidates;
  }
  return false;
}

std::vector<bool> legal_actions(const DerivationState& state, const SchemaCatalog& catalog, int n_candidates) {
  const ActionSpace space{state.grammar().n_rules(), catalog.n_columns(), catalog.n_tables(), n_candidates};
  std::vector<bool> mask(static_cast<std::size_t>(space.size()), false);
  const auto f = state.frontier();
  if (!f) return mask;
  switch (*f) {
    case NonTerminal::kC:
      for (int c = 0; c < catalog.n_columns(); ++c) mask[space.offset(ActionKind::kSelectColumn) + c] = true;
      break;
    case NonTerminal::kT:
      for (int t = 0; t < catalog.n_tables(); ++t)
        if (state.last_column() < 0 || catalog.table_has(t, state.last_column()))
          mask[space.offset(ActionKind::kSelectTable) + t] = true;
      break;
    case NonTerminal::kV:
      for (int v = 0; v < n_candidates; ++v) mask[space.offset(ActionKind::kSelectValue) + v] = true;
      break;
    default:
      for (int r : state.grammar().rules_for(*f))
        if (state.rule_fits_budget(r)) mask[r] = true;
  }
  return mask;
}

void DerivationState::apply(const Action& a, const SchemaCatalog& catalog, int n_candidates) {
  if (!is_legal(*this, a, catalog, n_candidates))
    throw Error(ErrorCode::kIllegalAction, "step " + std::to_string(steps()) + ": " +
                                               format_action(a, *grammar_, &catalog) + " is not legal here");
  const NonTerminal x = stack_.back();
  stack_.pop_back();
  pending_cost_ -= grammar_->min_cost(x);
  last_expanded_ = x;
  if (a.kind == ActionKind::kApplyRule) {
    const auto children = grammar_->rule(a.index).children();
    for (auto it = children.rbegin(); it != children.rend(); ++it) {
      stack_.push_back(*it);
      pending_cost_ += grammar_->min_cost(*it);
    }
  } else if (a.kind == ActionKind::kSelectColumn) {
    last_column_ = a.index;
  }
  actions_.push_back(a);
}

namespace {

SemQLTree grow(NonTerminal symbol, const ActionSequence& actions, std::size_t& pos, const Grammar& g) {
  SemQLTree node;
  node.symbol = symbol;
  const Action& a = actions[pos++];
  if (a.kind == ActionKind::kApplyRule) {
    node.rule = a.index;
    for (NonTerminal c : g.rule(a.index).children()) node.children.push_back(grow(c, actions, pos, g));
  } else {
    node.selection = a.index;
  }
  return node;
}

}  // namespace

SemQLTree build_tree(const ActionSequence& actions, const Grammar& grammar, const SchemaCatalog& catalog,
                     int n_candidates) {
  DerivationState state(grammar, 0);
  for (const auto& a : actions) {
    if (state.complete())
      throw Error(ErrorCode::kIllegalAction, "step " + std::to_string(state.steps()) + ": derivation already complete");
    state.apply(a, catalog, n_candidates);
  }
  if (!state.complete())
    throw Error(ErrorCode::kIncompleteDerivation,
                "frontier " + std::string(nonterminal_name(*state.frontier())) + " still unexpanded after " +
                    std::to_string(actions.size()) + " actions");
  std::size_t pos = 0;
  return grow(NonTerminal::kZ, actions, pos, grammar);
}

}  // namespace speechsql
