#pragma once

// SemQL grammar, decoder action inventory and derivation bookkeeping.

#include "speechsql/schema.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace speechsql {

enum class NonTerminal { kZ, kR, kSelect, kOrder, kA, kFilter, kC, kT, kV };
inline constexpr int kNumNonTerminals = 9;

std::string_view nonterminal_name(NonTerminal nt);
std::optional<NonTerminal> parse_nonterminal(std::string_view name);
/// C, T and V are filled by selection actions rather than productions.
inline bool is_selection_slot(NonTerminal nt) {
  return nt == NonTerminal::kC || nt == NonTerminal::kT || nt == NonTerminal::kV;
}

struct GrammarSymbol {
  bool nonterminal = false;
  NonTerminal nt = NonTerminal::kZ;
  std::string keyword;  // set when !nonterminal

  std::string text() const;
};

struct Production {
  int id = 0;
  NonTerminal lhs = NonTerminal::kZ;
  std::vector<GrammarSymbol> rhs;

  std::vector<NonTerminal> children() const;
  std::string text() const;  // "Filter := > A V"
};

class Grammar {
 public:
  Grammar() = default;
  explicit Grammar(std::vector<Production> productions);

  int n_rules() const { return static_cast<int>(productions_.size()); }
  const Production& rule(int id) const { return productions_[id]; }
  const std::vector<Production>& productions() const { return productions_; }
  const std::vector<int>& rules_for(NonTerminal lhs) const { return by_lhs_[static_cast<int>(lhs)]; }
  /// Rule whose rhs renders to exactly `rhs` (symbols joined by spaces); -1 if none.
  int find(NonTerminal lhs, std::string_view rhs) const;
  /// Minimum number of actions needed to complete a subtree rooted at nt.
  int min_cost(NonTerminal nt) const { return min_cost_[static_cast<int>(nt)]; }
  int rule_cost(int id) const { return rule_cost_[id]; }

 private:
  std::vector<Production> productions_;
  std::vector<std::vector<int>> by_lhs_ = std::vector<std::vector<int>>(kNumNonTerminals);
  std::vector<int> min_cost_ = std::vector<int>(kNumNonTerminals, 0);
  std::vector<int> rule_cost_;
};

/// One production per line, "LHS := sym sym ...". Blank lines and '#'
/// comments are ignored. Capitalized symbols must be known nonterminals,
/// anything else is a keyword terminal.
Grammar load_grammar(std::string_view spec_text);
std::string_view default_grammar_text();
const Grammar& default_grammar();

enum class ActionKind { kApplyRule, kSelectColumn, kSelectTable, kSelectValue };

struct Action {
  ActionKind kind = ActionKind::kApplyRule;
  int index = 0;

  static Action rule(int id) { return {ActionKind::kApplyRule, id}; }
  static Action column(int c) { return {ActionKind::kSelectColumn, c}; }
  static Action table(int t) { return {ActionKind::kSelectTable, t}; }
  static Action value(int v) { return {ActionKind::kSelectValue, v}; }
  friend bool operator==(const Action&, const Action&) = default;
};

using ActionSequence = std::vector<Action>;

std::string format_action(const Action& a, const Grammar& g, const SchemaCatalog* catalog = nullptr,
                          const std::vector<std::string>* candidates = nullptr);

/// Flat action space [rules | columns | tables | values] used for masks.
struct ActionSpace {
  int n_rules = 0;
  int n_columns = 0;
  int n_tables = 0;
  int n_values = 0;

  int size() const { return n_rules + n_columns + n_tables + n_values; }
  int offset(ActionKind k) const;
  int flat(const Action& a) const { return offset(a.kind) + a.index; }
  Action unflat(int i) const;
};

inline constexpr int kDefaultMaxSteps = 40;

/// Partial derivation with a leftmost pre-order frontier. max_steps <= 0
/// disables the step budget; otherwise productions that could not complete
/// within the budget are illegal, so any legal walk terminates in time.
class DerivationState {
 public:
  explicit DerivationState(const Grammar& grammar, int max_steps = kDefaultMaxSteps);

  bool complete() const { return stack_.empty(); }
  std::optional<NonTerminal> frontier() const;
  int steps() const { return static_cast<int>(actions_.size()); }
  int max_steps() const { return max_steps_; }
  int last_column() const { return last_column_; }
  const ActionSequence& actions() const { return actions_; }
  const Grammar& grammar() const { return *grammar_; }

  /// Nonterminal expanded by the most recent action (nullopt before any).
  std::optional<NonTerminal> last_expanded() const { return last_expanded_; }

  /// Applies a, throwing IllegalAction (with the step index) if it is not
  /// legal under legal_actions.
  void apply(const Action& a, const SchemaCatalog& catalog, int n_candidates);

  bool rule_fits_budget(int rule) const;

 private:
  const Grammar* grammar_;
  int max_steps_;
  std::vector<NonTerminal> stack_;  // back() is the frontier
  int pending_cost_ = 0;
  int last_column_ = -1;
  std::optional<NonTerminal> last_expanded_;
  ActionSequence actions_;
};

/// Mask over ActionSpace{grammar, catalog, n_candidates}. Complete states
/// yield an all-false mask.
std::vector<bool> legal_actions(const DerivationState& state, const SchemaCatalog& catalog, int n_candidates);
bool is_legal(const DerivationState& state, const Action& a, const SchemaCatalog& catalog, int n_candidates);

/// Derivation tree; selection leaves carry the chosen index in `selection`.
struct SemQLTree {
  NonTerminal symbol = NonTerminal::kZ;
  int rule = -1;
  int selection = -1;
  std::vector<SemQLTree> children;
};

/// Replays actions (validating legality without a step budget) into a tree.
/// Throws IllegalAction or IncompleteDerivation.
SemQLTree build_tree(const ActionSequence& actions, const Grammar& grammar, const SchemaCatalog& catalog,
                     int n_candidates);

}  // namespace speechsql
