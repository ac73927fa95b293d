#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fidam/rng.hpp"

namespace fidam {

using TokenSeq = std::vector<int>;
using PairSet = std::vector<std::pair<int, int>>;  // unordered pairs, stored i < j

// A probabilistic context-free grammar plus the task-level annotations the
// benchmark needs: a token bijection T for the mapped static baseline and a
// homomorphism h for mirrored-symbol languages.
struct Grammar {
  struct Production {
    int lhs;                // nonterminal index
    std::vector<int> rhs;   // >= 0: terminal index, < 0: nonterminal ~(idx)
    double prob = 0.0;
  };

  std::string name;
  std::vector<std::string> alphabet;
  std::vector<std::string> nonterminals;  // [0] is the start symbol
  std::vector<Production> productions;
  int max_length = 20;
  int max_depth = 0;               // 0 = unbounded; counts nested wrapping productions
  std::vector<int> static_map;     // empty, or a bijection over token indices
  std::vector<int> homomorphism;   // empty, or token -> mirrored token (-1 undefined)
  int middle_marker = -1;          // token index, -1 = none

  static int term(int t) { return t; }
  static int nonterm(int nt) { return ~nt; }
  static bool is_term(int sym) { return sym >= 0; }
  static int nt_of(int sym) { return ~sym; }

  int token_index(const std::string& s) const {
    for (std::size_t i = 0; i < alphabet.size(); ++i)
      if (alphabet[i] == s) return static_cast<int>(i);
    return -1;
  }

  bool has_static_map() const { return !static_map.empty(); }

  int map_token(int t) const {
    if (!has_static_map()) throw std::runtime_error("grammar '" + name + "' defines no static map");
    return static_map[static_cast<std::size_t>(t)];
  }

  // A production "wraps" a child nonterminal when terminals appear on both
  // sides of it; nesting depth counts wrapped ancestry (bracket depth for
  // Dyck, half-length for palindromes).
  static bool wraps(const Production& p, std::size_t child_pos) {
    bool term_before = false, term_after = false;
    for (std::size_t i = 0; i < child_pos; ++i) term_before |= is_term(p.rhs[i]);
    for (std::size_t i = child_pos + 1; i < p.rhs.size(); ++i) term_after |= is_term(p.rhs[i]);
    return term_before && term_after;
  }

  void validate() const {
    if (alphabet.empty()) throw std::invalid_argument("grammar: empty alphabet");
    if (max_length < 2) throw std::invalid_argument("grammar: max_length must be >= 2");
    if (nonterminals.empty() || productions.empty()) throw std::invalid_argument("grammar: no productions");
    std::vector<double> mass(nonterminals.size(), 0.0);
    std::vector<bool> seen(nonterminals.size(), false);
    for (const Production& p : productions) {
      if (p.lhs < 0 || p.lhs >= static_cast<int>(nonterminals.size()))
        throw std::invalid_argument("grammar: bad production lhs");
      if (p.prob < 0.0 || p.prob > 1.0) throw std::invalid_argument("grammar: probability outside [0,1]");
      mass[static_cast<std::size_t>(p.lhs)] += p.prob;
      seen[static_cast<std::size_t>(p.lhs)] = true;
      for (int sym : p.rhs) {
        if (is_term(sym)) {
          if (sym >= static_cast<int>(alphabet.size())) throw std::invalid_argument("grammar: bad terminal");
        } else if (nt_of(sym) >= static_cast<int>(nonterminals.size())) {
          throw std::invalid_argument("grammar: bad nonterminal");
        }
      }
    }
    for (std::size_t i = 0; i < nonterminals.size(); ++i) {
      if (!seen[i]) throw std::invalid_argument("grammar: nonterminal '" + nonterminals[i] + "' has no productions");
      if (std::abs(mass[i] - 1.0) > 1e-9)
        throw std::invalid_argument("grammar: probabilities for '" + nonterminals[i] + "' sum to " + std::to_string(mass[i]));
    }
    if (!static_map.empty()) {
      if (static_map.size() != alphabet.size()) throw std::invalid_argument("grammar: static map size mismatch");
      std::vector<bool> hit(alphabet.size(), false);
      for (int t : static_map) {
        if (t < 0 || t >= static_cast<int>(alphabet.size()) || hit[static_cast<std::size_t>(t)])
          throw std::invalid_argument("grammar: static map is not a bijection");
        hit[static_cast<std::size_t>(t)] = true;
      }
    }
  }
};

struct CorpusItem {
  TokenSeq tokens;
  bool well_formed = true;
  PairSet gold_pairs;
};

// D+ and D- with a reproducible train/test partition. Negatives are index-
// aligned with the positives they were corrupted from. Global item indices
// run over positives first, then negatives.
struct Corpus {
  std::vector<CorpusItem> positive;
  std::vector<CorpusItem> negative;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
  std::uint64_t seed = 0;

  std::size_t total() const { return positive.size() + negative.size(); }

  const CorpusItem& item(int global_idx) const {
    const int p = static_cast<int>(positive.size());
    return global_idx < p ? positive[static_cast<std::size_t>(global_idx)]
                          : negative[static_cast<std::size_t>(global_idx - p)];
  }
};

// ---------------------------------------------------------------------------
// Built-in grammars

struct GrammarParams {
  int max_length = 0;          // 0 = language default
  int alphabet_size = 0;       // identity_rule / palindrome symbol count, 0 = default
  bool middle_marker = false;  // palindrome center separator
  std::string custom_file;     // production table for name == "custom"
};

namespace detail {

inline Grammar identity_rule_grammar(int symbols, int max_length) {
  Grammar g;
  g.name = "identity_rule";
  g.max_length = max_length;
  for (int i = 0; i < symbols; ++i) g.alphabet.push_back(std::string(1, static_cast<char>('a' + i)));
  g.nonterminals = {"S", "A"};
  const double third = 1.0 / symbols;
  const double cont = 0.8;  // geometric tail keeps most strings well under max_length
  for (int i = 0; i < symbols; ++i) g.productions.push_back({0, {Grammar::term(i), Grammar::term(i), Grammar::nonterm(1)}, third});
  for (int i = 0; i < symbols; ++i) g.productions.push_back({1, {Grammar::term(i), Grammar::nonterm(1)}, cont / symbols});
  g.productions.push_back({1, {}, 1.0 - cont});
  return g;
}

inline Grammar dyck2_grammar(int max_length) {
  Grammar g;
  g.name = "dyck2";
  g.max_length = max_length;
  g.max_depth = 4;
  g.alphabet = {"(", ")", "[", "]"};
  g.nonterminals = {"S"};
  g.productions.push_back({0, {Grammar::term(0), Grammar::nonterm(0), Grammar::term(1)}, 0.25});
  g.productions.push_back({0, {Grammar::term(2), Grammar::nonterm(0), Grammar::term(3)}, 0.25});
  g.productions.push_back({0, {Grammar::nonterm(0), Grammar::nonterm(0)}, 0.25});
  g.productions.push_back({0, {}, 0.25});
  g.static_map = {2, 3, 0, 1};  // ( <-> [   ) <-> ]
  return g;
}

inline Grammar palindrome_grammar(int symbols, int max_length, bool middle_marker) {
  Grammar g;
  g.name = "palindrome";
  g.max_length = max_length;
  for (int i = 0; i < symbols; ++i) g.alphabet.push_back(std::string(1, static_cast<char>('a' + i)));
  for (int i = 0; i < symbols; ++i) g.alphabet.push_back(std::string(1, static_cast<char>('A' + i)));
  g.homomorphism.assign(g.alphabet.size(), -1);
  for (int i = 0; i < symbols; ++i) g.homomorphism[static_cast<std::size_t>(i)] = symbols + i;
  // T permutes base symbols cyclically and mirrors the permutation on the
  // mapped half, so T(x) of a palindrome is again a palindrome.
  g.static_map.assign(g.alphabet.size(), 0);
  for (int i = 0; i < symbols; ++i) {
    g.static_map[static_cast<std::size_t>(i)] = (i + 1) % symbols;
    g.static_map[static_cast<std::size_t>(symbols + i)] = symbols + (i + 1) % symbols;
  }
  g.nonterminals = {"S"};
  const double cont = 0.75;
  for (int i = 0; i < symbols; ++i)
    g.productions.push_back({0, {Grammar::term(i), Grammar::nonterm(0), Grammar::term(symbols + i)}, cont / symbols});
  if (middle_marker) {
    g.alphabet.push_back("|");
    g.middle_marker = static_cast<int>(g.alphabet.size()) - 1;
    g.homomorphism.push_back(-1);
    g.static_map.push_back(g.middle_marker);
    g.productions.push_back({0, {Grammar::term(g.middle_marker)}, 1.0 - cont});
  } else {
    g.productions.push_back({0, {}, 1.0 - cont});
  }
  return g;
}

}  // namespace detail

Grammar read_grammar(const std::string& path);  // defined below

inline Grammar build_grammar(const std::string& name, const GrammarParams& params = {}) {
  Grammar g;
  if (name == "identity_rule") {
    g = detail::identity_rule_grammar(params.alphabet_size > 0 ? params.alphabet_size : 3,
                                      params.max_length > 0 ? params.max_length : 20);
  } else if (name == "dyck2") {
    g = detail::dyck2_grammar(params.max_length > 0 ? params.max_length : 20);
  } else if (name == "palindrome") {
    g = detail::palindrome_grammar(params.alphabet_size > 0 ? params.alphabet_size : 10,
                                   params.max_length > 0 ? params.max_length : 18, params.middle_marker);
  } else if (name == "custom") {
    if (params.custom_file.empty()) throw std::invalid_argument("custom grammar requires a production table file");
    g = read_grammar(params.custom_file);
    if (params.max_length > 0) g.max_length = params.max_length;
  } else {
    throw std::invalid_argument("unknown grammar '" + name + "'");
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Well-formedness oracles and gold interaction pairs

inline bool dyck_check(const TokenSeq& tokens) {
  // alphabet layout: even index opens, odd index closes the same type
  std::vector<int> stack;
  for (int t : tokens) {
    if (t % 2 == 0) {
      stack.push_back(t);
    } else {
      if (stack.empty() || stack.back() != t - 1) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

inline bool is_well_formed(const Grammar& g, const TokenSeq& tokens) {
  if (static_cast<int>(tokens.size()) < 2) return false;
  if (g.name == "identity_rule") return tokens[0] == tokens[1];
  if (g.name == "dyck2") return dyck_check(tokens);
  if (g.name == "palindrome") {
    const int n = static_cast<int>(tokens.size());
    if (g.middle_marker >= 0) {
      if (n % 2 == 0 || tokens[static_cast<std::size_t>(n / 2)] != g.middle_marker) return false;
    } else if (n % 2 != 0) {
      return false;
    }
    for (int i = 0; i < n / 2; ++i) {
      int base = tokens[static_cast<std::size_t>(i)];
      if (base < 0 || base >= static_cast<int>(g.homomorphism.size())) return false;
      int mapped = g.homomorphism[static_cast<std::size_t>(base)];
      if (mapped < 0 || tokens[static_cast<std::size_t>(n - 1 - i)] != mapped) return false;
    }
    return true;
  }
  throw std::runtime_error("no membership oracle for grammar '" + g.name + "'");
}

inline PairSet gold_pairs(const Grammar& g, const TokenSeq& tokens) {
  PairSet pairs;
  const int n = static_cast<int>(tokens.size());
  if (g.name == "identity_rule") {
    pairs.push_back({0, 1});
  } else if (g.name == "dyck2") {
    std::vector<int> stack;
    for (int i = 0; i < n; ++i) {
      if (tokens[static_cast<std::size_t>(i)] % 2 == 0) {
        stack.push_back(i);
      } else {
        if (stack.empty()) throw std::invalid_argument("gold_pairs: ill-formed dyck string");
        pairs.push_back({stack.back(), i});
        stack.pop_back();
      }
    }
    if (!stack.empty()) throw std::invalid_argument("gold_pairs: ill-formed dyck string");
    std::sort(pairs.begin(), pairs.end());
  } else if (g.name == "palindrome") {
    for (int i = 0; i < n / 2; ++i) pairs.push_back({i, n - 1 - i});
  } else {
    // Custom grammars carry no structural annotation.
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleLimits {
  int min_length = 2;
  std::size_t attempt_budget = 200000;
};

namespace detail {

// Expands the start symbol once; returns false when length/depth constraints
// were violated so the caller can reject and restart the whole derivation
// (restarting keeps rule probabilities intact conditional on acceptance).
inline bool derive_once(const Grammar& g, Rng& rng, TokenSeq& out) {
  out.clear();
  // Work stack of (symbol, depth), expanded leftmost-first.
  std::vector<std::pair<int, int>> pending;
  pending.push_back({Grammar::nonterm(0), 0});
  // Critical-branching grammars (Dyck's S -> S S) can balloon before the
  // length prune bites; cap total expansions and reject.
  int expansions = 0;
  while (!pending.empty()) {
    auto [sym, depth] = pending.back();
    pending.pop_back();
    if (Grammar::is_term(sym)) {
      out.push_back(sym);
      if (static_cast<int>(out.size()) > g.max_length) return false;
      continue;
    }
    const int nt = Grammar::nt_of(sym);
    if (++expansions > 4096) return false;
    double u = rng.next_double();
    const Grammar::Production* chosen = nullptr;
    for (const auto& p : g.productions) {
      if (p.lhs != nt) continue;
      if (u < p.prob) {
        chosen = &p;
        break;
      }
      u -= p.prob;
      chosen = &p;  // numerical slack lands on the last production
    }
    for (std::size_t i = chosen->rhs.size(); i-- > 0;) {
      int child = chosen->rhs[i];
      int child_depth = depth;
      if (!Grammar::is_term(child) && Grammar::wraps(*chosen, i)) {
        child_depth = depth + 1;
        if (g.max_depth > 0 && child_depth > g.max_depth) return false;
      }
      pending.push_back({child, child_depth});
    }
  }
  return true;
}

}  // namespace detail

inline TokenSeq sample_string(const Grammar& g, Rng& rng, const SampleLimits& limits = {}) {
  TokenSeq s;
  for (std::size_t attempt = 0; attempt < limits.attempt_budget; ++attempt) {
    if (!detail::derive_once(g, rng, s)) continue;
    if (static_cast<int>(s.size()) < limits.min_length) continue;
    return s;
  }
  throw std::runtime_error("sample_string: attempt budget exhausted for grammar '" + g.name + "'");
}

// Positives only; negatives are added by corrupt_corpus.
inline Corpus sample_corpus(const Grammar& g, int size, std::uint64_t seed, const SampleLimits& limits = {}) {
  if (size < 1) throw std::invalid_argument("sample_corpus: size must be >= 1");
  Corpus c;
  c.seed = seed;
  Rng rng = Rng(seed).split(0x706f73);
  c.positive.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    CorpusItem item;
    item.tokens = sample_string(g, rng, limits);
    item.well_formed = true;
    item.gold_pairs = gold_pairs(g, item.tokens);
    c.positive.push_back(std::move(item));
  }
  return c;
}

// Minimal corruption: Hamming distance 1 from the source item, guaranteed to
// leave the language.
inline CorpusItem corrupt(const CorpusItem& item, const Grammar& g, Rng& rng) {
  if (!item.well_formed) throw std::invalid_argument("corrupt: item is not well-formed");
  const int n = static_cast<int>(item.tokens.size());
  CorpusItem neg = item;
  neg.well_formed = false;
  if (g.name == "identity_rule") {
    if (n < 2) throw std::invalid_argument("corrupt: item too short");
    const int pos = rng.next_int(0, 2);
    const int other = item.tokens[static_cast<std::size_t>(1 - pos)];
    int repl = rng.next_int(0, static_cast<int>(g.alphabet.size()) - 1);
    if (repl >= other) ++repl;  // anything but the partner symbol
    neg.tokens[static_cast<std::size_t>(pos)] = repl;
    return neg;
  }
  if (g.name == "dyck2") {
    for (int tries = 0; tries < 1000; ++tries) {
      neg.tokens = item.tokens;
      const int pos = rng.next_int(0, n);
      int repl = rng.next_int(0, 3);
      if (repl >= item.tokens[static_cast<std::size_t>(pos)]) ++repl;
      neg.tokens[static_cast<std::size_t>(pos)] = repl;
      if (!dyck_check(neg.tokens)) return neg;
    }
    throw std::runtime_error("corrupt: could not break dyck string");
  }
  if (g.name == "palindrome") {
    // Replace one second-half symbol with a differently mapped symbol.
    const int half = n / 2;
    const int base_syms =
        static_cast<int>(std::count_if(g.homomorphism.begin(), g.homomorphism.end(), [](int m) { return m >= 0; }));
    const int pos = g.middle_marker >= 0 ? rng.next_int(half + 1, n) : rng.next_int(half, n);
    const int mirror = item.tokens[static_cast<std::size_t>(n - 1 - pos)];
    const int correct = g.homomorphism[static_cast<std::size_t>(mirror)];
    int pick = rng.next_int(0, base_syms - 1);
    int count = 0, repl = -1;
    for (std::size_t t = 0; t < g.homomorphism.size(); ++t) {
      int mapped = g.homomorphism[t];
      if (mapped < 0 || mapped == correct) continue;
      if (count++ == pick) {
        repl = mapped;
        break;
      }
    }
    neg.tokens[static_cast<std::size_t>(pos)] = repl;
    return neg;
  }
  // Custom grammars: single random flip, checked against the membership
  // oracle when one exists.
  for (int tries = 0; tries < 1000; ++tries) {
    neg.tokens = item.tokens;
    const int pos = rng.next_int(0, n);
    int repl = rng.next_int(0, static_cast<int>(g.alphabet.size()) - 1);
    if (repl >= item.tokens[static_cast<std::size_t>(pos)]) ++repl;
    neg.tokens[static_cast<std::size_t>(pos)] = repl;
    return neg;
  }
  throw std::runtime_error("corrupt: failed");
}

inline void corrupt_corpus(Corpus& c, const Grammar& g, std::uint64_t seed) {
  Rng rng = Rng(seed).split(0x6e6567);
  c.negative.clear();
  c.negative.reserve(c.positive.size());
  for (const CorpusItem& item : c.positive) c.negative.push_back(corrupt(item, g, rng));
}

// Label-stratified, disjoint, exhaustive partition; deterministic in seed.
inline void make_split(Corpus& c, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("make_split: ratio must be in (0,1)");
  if (c.total() == 0) throw std::invalid_argument("make_split: empty corpus");
  c.train_idx.clear();
  c.test_idx.clear();
  Rng rng = Rng(seed).split(0x73706c69);
  const int p = static_cast<int>(c.positive.size());
  auto split_part = [&](int count, int offset) {
    std::vector<int> idx(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = offset + i;
    rng.shuffle(idx);
    const int n_train = static_cast<int>(std::llround(ratio * count));
    for (int i = 0; i < count; ++i) (i < n_train ? c.train_idx : c.test_idx).push_back(idx[static_cast<std::size_t>(i)]);
  };
  split_part(p, 0);
  split_part(static_cast<int>(c.negative.size()), p);
  std::sort(c.train_idx.begin(), c.train_idx.end());
  std::sort(c.test_idx.begin(), c.test_idx.end());
}

// ---------------------------------------------------------------------------
// Complete-language enumeration (observational baseline pool)

// Enumerates every string of the grammar's language at an exact length,
// respecting the depth cap, with results cached per length. Length-indexed
// sets are built bottom-up per (symbol, length, depth) so duplicates from
// ambiguous derivations collapse naturally.
class LanguagePool {
 public:
  LanguagePool(const Grammar& g, std::size_t budget = 5000000) : g_(&g), budget_(budget) {}

  const std::vector<TokenSeq>& strings_of_length(int length) {
    auto it = by_length_.find(length);
    if (it != by_length_.end()) return it->second;
    std::vector<TokenSeq> out = enumerate_exact(length);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return by_length_.emplace(length, std::move(out)).first->second;
  }

  const Grammar& grammar() const { return *g_; }

 private:
  using Key = std::uint64_t;
  static Key key(int sym, int len, int depth) {
    return (static_cast<Key>(static_cast<std::uint32_t>(sym)) << 32) ^ (static_cast<Key>(len) << 8) ^ static_cast<Key>(depth);
  }

  std::vector<TokenSeq> enumerate_exact(int length) {
    memo_.clear();
    in_progress_.clear();
    count_ = 0;
    std::set<Key> hits;
    return expand_symbol(Grammar::nonterm(0), length, 0, hits);
  }

  // Nullable cycles (Dyck's S -> S S with an empty side) recurse into the
  // state currently being computed. Every string also has a cycle-free
  // derivation, so re-entry may simply return empty; the set of in-progress
  // states hit below is propagated so that a state is memoized only once its
  // result cannot depend on a still-open foreign state.
  std::vector<TokenSeq> expand_symbol(int sym, int len, int depth, std::set<Key>& hits) {
    if (Grammar::is_term(sym)) {
      if (len != 1) return {};
      return {TokenSeq{sym}};
    }
    const Key k = key(sym, len, depth);
    auto it = memo_.find(k);
    if (it != memo_.end()) return it->second;
    if (in_progress_.count(k)) {
      hits.insert(k);
      return {};
    }
    in_progress_.insert(k);
    std::set<Key> local_hits;
    std::vector<TokenSeq> out;
    const int nt = Grammar::nt_of(sym);
    for (const auto& p : g_->productions) {
      if (p.lhs != nt || p.prob <= 0.0) continue;
      expand_rhs(p, 0, len, depth, {}, out, local_hits);
    }
    in_progress_.erase(k);
    if ((count_ += out.size()) > budget_) throw std::runtime_error("language enumeration exceeded pool budget");
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    local_hits.erase(k);  // hits on itself are resolved by this result
    if (local_hits.empty()) {
      memo_.emplace(k, out);
    } else {
      hits.insert(local_hits.begin(), local_hits.end());
    }
    return out;
  }

  void expand_rhs(const Grammar::Production& p, std::size_t pos, int len, int depth, TokenSeq prefix,
                  std::vector<TokenSeq>& out, std::set<Key>& hits) {
    if (pos == p.rhs.size()) {
      if (len == 0) out.push_back(std::move(prefix));
      return;
    }
    const int sym = p.rhs[pos];
    int child_depth = depth;
    if (!Grammar::is_term(sym) && Grammar::wraps(p, pos)) {
      child_depth = depth + 1;
      if (g_->max_depth > 0 && child_depth > g_->max_depth) return;
    }
    const int lo = Grammar::is_term(sym) ? 1 : 0;
    for (int take = lo; take <= len; ++take) {
      std::vector<TokenSeq> parts = expand_symbol(sym, take, child_depth, hits);
      if (parts.empty()) {
        if (Grammar::is_term(sym)) break;
        continue;
      }
      for (const TokenSeq& part : parts) {
        TokenSeq next = prefix;
        next.insert(next.end(), part.begin(), part.end());
        expand_rhs(p, pos + 1, len - take, depth, std::move(next), out, hits);
      }
      if (Grammar::is_term(sym)) break;  // terminals consume exactly one slot
    }
  }

  const Grammar* g_;
  std::size_t budget_;
  std::size_t count_ = 0;
  std::map<int, std::vector<TokenSeq>> by_length_;
  std::map<Key, std::vector<TokenSeq>> memo_;
  std::set<Key> in_progress_;
};

// ---------------------------------------------------------------------------
// Text formats. Corpus lines: `<label>\t<space-separated tokens>\t<pairs>`,
// pairs as comma-separated `i-j`. Grammar files: `# key value` directives
// followed by `LHS -> RHS... : prob` lines.

inline std::string tokens_to_text(const Grammar& g, const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += g.alphabet[static_cast<std::size_t>(tokens[i])];
  }
  return out;
}

inline TokenSeq tokens_from_text(const Grammar& g, const std::string& text) {
  TokenSeq out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    int idx = g.token_index(tok);
    if (idx < 0) throw std::runtime_error("unknown token '" + tok + "'");
    out.push_back(idx);
  }
  return out;
}

inline std::string corpus_line(const Grammar& g, const CorpusItem& item) {
  std::string line = item.well_formed ? "1" : "0";
  line += '\t';
  line += tokens_to_text(g, item.tokens);
  line += '\t';
  for (std::size_t k = 0; k < item.gold_pairs.size(); ++k) {
    if (k) line += ',';
    line += std::to_string(item.gold_pairs[k].first) + "-" + std::to_string(item.gold_pairs[k].second);
  }
  return line;
}

inline CorpusItem parse_corpus_line(const Grammar& g, const std::string& line) {
  const std::size_t t1 = line.find('\t');
  const std::size_t t2 = line.find('\t', t1 + 1);
  if (t1 == std::string::npos || t2 == std::string::npos) throw std::runtime_error("corpus line: expected three tab-separated fields");
  CorpusItem item;
  item.well_formed = line.substr(0, t1) == "1";
  item.tokens = tokens_from_text(g, line.substr(t1 + 1, t2 - t1 - 1));
  std::string pairs = line.substr(t2 + 1);
  std::istringstream in(pairs);
  std::string entry;
  while (std::getline(in, entry, ',')) {
    if (entry.empty()) continue;
    const std::size_t dash = entry.find('-');
    if (dash == std::string::npos) throw std::runtime_error("corpus line: bad pair '" + entry + "'");
    item.gold_pairs.push_back({std::stoi(entry.substr(0, dash)), std::stoi(entry.substr(dash + 1))});
  }
  return item;
}

inline void write_corpus(const std::string& path, const Grammar& g, const Corpus& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const CorpusItem& item : c.positive) out << corpus_line(g, item) << '\n';
  for (const CorpusItem& item : c.negative) out << corpus_line(g, item) << '\n';
}

inline Corpus read_corpus(const std::string& path, const Grammar& g) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  Corpus c;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CorpusItem item = parse_corpus_line(g, line);
    (item.well_formed ? c.positive : c.negative).push_back(std::move(item));
  }
  return c;
}

inline void write_pool_cache(const std::string& path, const Grammar& g, const std::vector<TokenSeq>& strings) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const TokenSeq& s : strings) {
    CorpusItem item;
    item.tokens = s;
    out << corpus_line(g, item) << '\n';
  }
}

inline std::string grammar_to_text(const Grammar& g) {
  std::ostringstream out;
  out << "# grammar " << g.name << '\n';
  out << "# alphabet";
  for (const std::string& s : g.alphabet) out << ' ' << s;
  out << '\n';
  out << "# max_length " << g.max_length << '\n';
  if (g.max_depth > 0) out << "# max_depth " << g.max_depth << '\n';
  if (!g.static_map.empty()) {
    out << "# static_map";
    for (std::size_t i = 0; i < g.static_map.size(); ++i)
      out << ' ' << g.alphabet[i] << ':' << g.alphabet[static_cast<std::size_t>(g.static_map[i])];
    out << '\n';
  }
  if (!g.homomorphism.empty()) {
    out << "# homomorphism";
    for (std::size_t i = 0; i < g.homomorphism.size(); ++i)
      if (g.homomorphism[i] >= 0) out << ' ' << g.alphabet[i] << ':' << g.alphabet[static_cast<std::size_t>(g.homomorphism[i])];
    out << '\n';
  }
  if (g.middle_marker >= 0) out << "# middle_marker " << g.alphabet[static_cast<std::size_t>(g.middle_marker)] << '\n';
  char buf[64];
  for (const auto& p : g.productions) {
    out << g.nonterminals[static_cast<std::size_t>(p.lhs)] << " ->";
    for (int sym : p.rhs)
      out << ' ' << (Grammar::is_term(sym) ? g.alphabet[static_cast<std::size_t>(sym)] : g.nonterminals[static_cast<std::size_t>(Grammar::nt_of(sym))]);
    std::snprintf(buf, sizeof buf, "%.17g", p.prob);
    out << " : " << buf << '\n';
  }
  return out.str();
}

inline void write_grammar(const std::string& path, const Grammar& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << grammar_to_text(g);
}

inline Grammar parse_grammar_text(std::istream& in) {
  Grammar g;
  std::vector<std::array<std::string, 2>> map_pairs, hom_pairs;
  std::string marker;
  struct RawProduction {
    std::string lhs;
    std::vector<std::string> rhs;
    double prob;
  };
  std::vector<RawProduction> raw;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, keyword;
      ls >> hash >> keyword;
      if (keyword == "grammar") ls >> g.name;
      else if (keyword == "alphabet") {
        std::string tok;
        while (ls >> tok) g.alphabet.push_back(tok);
      } else if (keyword == "max_length") ls >> g.max_length;
      else if (keyword == "max_depth") ls >> g.max_depth;
      else if (keyword == "static_map" || keyword == "homomorphism") {
        std::string entry;
        while (ls >> entry) {
          const std::size_t colon = entry.find(':');
          if (colon == std::string::npos) throw std::runtime_error("grammar file: bad mapping entry '" + entry + "'");
          std::array<std::string, 2> pair = {entry.substr(0, colon), entry.substr(colon + 1)};
          (keyword == "static_map" ? map_pairs : hom_pairs).push_back(pair);
        }
      } else if (keyword == "middle_marker") ls >> marker;
      continue;
    }
    // production: LHS -> sym sym ... : prob
    std::vector<std::string> fields;
    std::string tok;
    while (ls >> tok) fields.push_back(tok);
    if (fields.size() < 4 || fields[1] != "->" || fields[fields.size() - 2] != ":")
      throw std::runtime_error("grammar file: bad production line '" + line + "'");
    RawProduction p;
    p.lhs = fields[0];
    for (std::size_t i = 2; i + 2 < fields.size(); ++i) p.rhs.push_back(fields[i]);
    p.prob = std::stod(fields.back());
    raw.push_back(std::move(p));
  }
  if (g.name.empty()) g.name = "custom";
  auto nt_index = [&](const std::string& s) {
    for (std::size_t i = 0; i < g.nonterminals.size(); ++i)
      if (g.nonterminals[i] == s) return static_cast<int>(i);
    g.nonterminals.push_back(s);
    return static_cast<int>(g.nonterminals.size()) - 1;
  };
  for (const RawProduction& p : raw) nt_index(p.lhs);
  for (const RawProduction& p : raw) {
    Grammar::Production out;
    out.lhs = nt_index(p.lhs);
    out.prob = p.prob;
    for (const std::string& s : p.rhs) {
      int t = g.token_index(s);
      if (t >= 0) {
        out.rhs.push_back(Grammar::term(t));
      } else {
        bool is_nt = std::find(g.nonterminals.begin(), g.nonterminals.end(), s) != g.nonterminals.end();
        if (!is_nt) throw std::runtime_error("grammar file: symbol '" + s + "' is neither a token nor a production head");
        out.rhs.push_back(Grammar::nonterm(nt_index(s)));
      }
    }
    g.productions.push_back(std::move(out));
  }
  auto apply_mapping = [&](const std::vector<std::array<std::string, 2>>& pairs, std::vector<int>& target, int fill) {
    if (pairs.empty()) return;
    target.assign(g.alphabet.size(), fill);
    for (const auto& pr : pairs) {
      int a = g.token_index(pr[0]), b = g.token_index(pr[1]);
      if (a < 0 || b < 0) throw std::runtime_error("grammar file: mapping over unknown tokens");
      target[static_cast<std::size_t>(a)] = b;
    }
  };
  apply_mapping(map_pairs, g.static_map, 0);
  if (!map_pairs.empty()) {
    // unmapped identity entries
    std::vector<bool> given(g.alphabet.size(), false);
    for (const auto& pr : map_pairs) given[static_cast<std::size_t>(g.token_index(pr[0]))] = true;
    for (std::size_t i = 0; i < g.alphabet.size(); ++i)
      if (!given[i]) g.static_map[i] = static_cast<int>(i);
  }
  apply_mapping(hom_pairs, g.homomorphism, -1);
  if (!marker.empty()) g.middle_marker = g.token_index(marker);
  g.validate();
  return g;
}

inline Grammar read_grammar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return parse_grammar_text(in);
}

}  // namespace fidam
