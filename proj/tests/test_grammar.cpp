#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>

#include "fidam/grammar.hpp"

using namespace fidam;

namespace {

// Independent well-formedness oracle for Dyck-2: repeatedly erase adjacent
// matched pairs until a fixpoint. Deliberately different from the stack scan
// in the library.
bool dyck_by_erasure(const TokenSeq& tokens) {
  std::string s;
  for (int t : tokens) s += "()[]"[t];
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      if ((s[i] == '(' && s[i + 1] == ')') || (s[i] == '[' && s[i + 1] == ']')) {
        s.erase(i, 2);
        changed = true;
        break;
      }
    }
  }
  return s.empty();
}

int hamming(const TokenSeq& a, const TokenSeq& b) {
  EXPECT_EQ(a.size(), b.size());
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(BuildGrammar, Dyck2Defaults) {
  Grammar g = build_grammar("dyck2");
  EXPECT_EQ(g.productions.size(), 4u);
  for (const auto& p : g.productions) EXPECT_DOUBLE_EQ(p.prob, 0.25);
  EXPECT_EQ(g.alphabet.size(), 4u);
  EXPECT_EQ(g.max_length, 20);
  EXPECT_EQ(g.max_depth, 4);
  // bracket map swaps types
  EXPECT_EQ(g.map_token(0), 2);
  EXPECT_EQ(g.map_token(1), 3);
}

TEST(BuildGrammar, IdentityRuleDefaults) {
  Grammar g = build_grammar("identity_rule");
  EXPECT_EQ(g.alphabet.size(), 3u);
  EXPECT_EQ(g.max_length, 20);
  EXPECT_FALSE(g.has_static_map());
}

TEST(BuildGrammar, PalindromeDefaults) {
  Grammar g = build_grammar("palindrome");
  EXPECT_EQ(g.alphabet.size(), 20u);  // 10 base + 10 mirrored symbols
  EXPECT_EQ(g.max_length, 18);
  EXPECT_EQ(g.homomorphism[0], 10);
  // T preserves grammaticality: h(T(x)) == T(h(x))
  for (int i = 0; i < 10; ++i)
    EXPECT_EQ(g.homomorphism[static_cast<std::size_t>(g.static_map[static_cast<std::size_t>(i)])],
              g.static_map[static_cast<std::size_t>(g.homomorphism[static_cast<std::size_t>(i)])]);
}

TEST(BuildGrammar, RejectsBadInputs) {
  EXPECT_THROW(build_grammar("nosuch"), std::invalid_argument);
  GrammarParams p;
  p.max_length = 1;
  EXPECT_THROW(build_grammar("dyck2", p), std::invalid_argument);
  // custom grammar with probabilities summing to 0.9
  std::string path = temp_path("bad_grammar.txt");
  {
    std::ofstream out(path);
    out << "# grammar custom\n# alphabet a b\nS -> a : 0.5\nS -> b : 0.4\n";
  }
  GrammarParams cp;
  cp.custom_file = path;
  EXPECT_THROW(build_grammar("custom", cp), std::invalid_argument);
}

TEST(Sampling, IdentityRuleFirstTwoSymbolsMatch) {
  Grammar g = build_grammar("identity_rule");
  Corpus c = sample_corpus(g, 1000, 42);
  ASSERT_EQ(c.positive.size(), 1000u);
  for (const CorpusItem& item : c.positive) {
    ASSERT_GE(item.tokens.size(), 2u);
    ASSERT_LE(static_cast<int>(item.tokens.size()), g.max_length);
    EXPECT_EQ(item.tokens[0], item.tokens[1]);
  }
}

TEST(Sampling, DyckStringsPassIndependentOracle) {
  Grammar g = build_grammar("dyck2");
  Corpus c = sample_corpus(g, 500, 7);
  for (const CorpusItem& item : c.positive) {
    EXPECT_TRUE(dyck_by_erasure(item.tokens));
    EXPECT_LE(static_cast<int>(item.tokens.size()), g.max_length);
  }
}

TEST(Sampling, DyckRespectsDepthCap) {
  Grammar g = build_grammar("dyck2");
  Corpus c = sample_corpus(g, 500, 11);
  for (const CorpusItem& item : c.positive) {
    int depth = 0, peak = 0;
    for (int t : item.tokens) {
      depth += (t % 2 == 0) ? 1 : -1;
      peak = std::max(peak, depth);
    }
    EXPECT_LE(peak, 4);
  }
}

TEST(Sampling, DeterministicInSeed) {
  Grammar g = build_grammar("dyck2");
  Corpus a = sample_corpus(g, 200, 99);
  Corpus b = sample_corpus(g, 200, 99);
  ASSERT_EQ(a.positive.size(), b.positive.size());
  for (std::size_t i = 0; i < a.positive.size(); ++i) EXPECT_EQ(a.positive[i].tokens, b.positive[i].tokens);
  Corpus d = sample_corpus(g, 200, 100);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.positive.size(); ++i) any_diff |= a.positive[i].tokens != d.positive[i].tokens;
  EXPECT_TRUE(any_diff);
}

TEST(Sampling, PalindromeMirrorsViaHomomorphism) {
  Grammar g = build_grammar("palindrome");
  Corpus c = sample_corpus(g, 300, 5);
  for (const CorpusItem& item : c.positive) {
    const int n = static_cast<int>(item.tokens.size());
    EXPECT_EQ(n % 2, 0);
    EXPECT_LE(n, 18);
    for (int i = 0; i < n / 2; ++i)
      EXPECT_EQ(item.tokens[static_cast<std::size_t>(n - 1 - i)],
                g.homomorphism[static_cast<std::size_t>(item.tokens[static_cast<std::size_t>(i)])]);
  }
}

TEST(Corruption, IdentityRuleSpecExample) {
  Grammar g = build_grammar("identity_rule");
  // "aabcb" -> first-two symbol corruption, e.g. "cabcb"
  CorpusItem item;
  item.tokens = tokens_from_text(g, "a a b c b");
  item.well_formed = true;
  item.gold_pairs = gold_pairs(g, item.tokens);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    CorpusItem neg = corrupt(item, g, rng);
    EXPECT_EQ(hamming(item.tokens, neg.tokens), 1);
    EXPECT_NE(neg.tokens[0], neg.tokens[1]);
    // only the first two positions may change
    for (std::size_t i = 2; i < neg.tokens.size(); ++i) EXPECT_EQ(neg.tokens[i], item.tokens[i]);
    EXPECT_FALSE(neg.well_formed);
    EXPECT_EQ(neg.gold_pairs, item.gold_pairs);
  }
}

TEST(Corruption, SingleFlipBreaksDyck) {
  Grammar g = build_grammar("dyck2");
  CorpusItem item;
  item.tokens = tokens_from_text(g, "( )");
  item.well_formed = true;
  Rng rng(1);
  CorpusItem neg = corrupt(item, g, rng);
  EXPECT_EQ(hamming(item.tokens, neg.tokens), 1);
  EXPECT_FALSE(dyck_by_erasure(neg.tokens));
}

TEST(Corruption, WholeCorpusOracleAgreement) {
  // Stack oracle accepts every positive and rejects every negative, and
  // corruption is Hamming-1, for all three built-in languages.
  for (const std::string& name : {"identity_rule", "dyck2", "palindrome"}) {
    Grammar g = build_grammar(name);
    Corpus c = sample_corpus(g, 400, 21);
    corrupt_corpus(c, g, 21);
    ASSERT_EQ(c.positive.size(), c.negative.size());
    for (std::size_t i = 0; i < c.positive.size(); ++i) {
      EXPECT_TRUE(is_well_formed(g, c.positive[i].tokens)) << name;
      EXPECT_FALSE(is_well_formed(g, c.negative[i].tokens)) << name;
      EXPECT_EQ(hamming(c.positive[i].tokens, c.negative[i].tokens), 1) << name;
      if (name == "dyck2") EXPECT_FALSE(dyck_by_erasure(c.negative[i].tokens));
    }
  }
}

TEST(GoldPairs, DyckStackMatching) {
  Grammar g = build_grammar("dyck2");
  PairSet pairs = gold_pairs(g, tokens_from_text(g, "( [ ] )"));
  PairSet expect = {{0, 3}, {1, 2}};
  EXPECT_EQ(pairs, expect);
}

TEST(GoldPairs, IdentityAndPalindrome) {
  Grammar gi = build_grammar("identity_rule");
  PairSet pi = gold_pairs(gi, tokens_from_text(gi, "a a b c b"));
  EXPECT_EQ(pi, (PairSet{{0, 1}}));

  Grammar gp = build_grammar("palindrome");
  PairSet pp = gold_pairs(gp, tokens_from_text(gp, "a b B A"));
  EXPECT_EQ(pp, (PairSet{{0, 3}, {1, 2}}));
}

TEST(GoldPairs, DyckPerfectNonCrossingMatching) {
  Grammar g = build_grammar("dyck2");
  Corpus c = sample_corpus(g, 300, 13);
  for (const CorpusItem& item : c.positive) {
    const int n = static_cast<int>(item.tokens.size());
    PairSet pairs = gold_pairs(g, item.tokens);
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (auto [i, j] : pairs) {
      EXPECT_LT(i, j);
      ++seen[static_cast<std::size_t>(i)];
      ++seen[static_cast<std::size_t>(j)];
    }
    for (int s : seen) EXPECT_EQ(s, 1);  // perfect matching
    for (auto [i, j] : pairs)
      for (auto [k, l] : pairs)
        if (i < k) EXPECT_TRUE(l < j || k > j) << "crossing pair";  // properly nested
  }
}

TEST(Split, StratifiedDeterministicPartition) {
  Grammar g = build_grammar("identity_rule");
  Corpus c = sample_corpus(g, 1000, 17);
  corrupt_corpus(c, g, 17);
  make_split(c, 0.8, 17);
  EXPECT_EQ(c.train_idx.size(), 1600u);
  EXPECT_EQ(c.test_idx.size(), 400u);

  // label stratification: exactly 800 positives in train
  int train_pos = 0;
  for (int i : c.train_idx) train_pos += i < 1000;
  EXPECT_EQ(train_pos, 800);

  // disjoint and exhaustive
  std::set<int> all(c.train_idx.begin(), c.train_idx.end());
  for (int i : c.test_idx) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 2000u);

  // deterministic
  Corpus c2 = sample_corpus(g, 1000, 17);
  corrupt_corpus(c2, g, 17);
  make_split(c2, 0.8, 17);
  EXPECT_EQ(c.train_idx, c2.train_idx);
  EXPECT_EQ(c.test_idx, c2.test_idx);

  EXPECT_THROW(make_split(c, 1.2, 1), std::invalid_argument);
}

TEST(Enumeration, DyckLengthTwoAndFour) {
  Grammar g = build_grammar("dyck2");
  LanguagePool pool(g);
  const auto& l2 = pool.strings_of_length(2);
  ASSERT_EQ(l2.size(), 2u);  // () and []
  for (const TokenSeq& s : l2) EXPECT_TRUE(dyck_by_erasure(s));

  const auto& l4 = pool.strings_of_length(4);
  EXPECT_EQ(l4.size(), 8u);  // 4 nested + 4 concatenated
  std::set<TokenSeq> uniq(l4.begin(), l4.end());
  EXPECT_EQ(uniq.size(), l4.size());
  for (const TokenSeq& s : l4) EXPECT_TRUE(dyck_by_erasure(s));
}

TEST(Enumeration, DepthCapShrinksLanguage) {
  Grammar g = build_grammar("dyck2");
  g.max_depth = 1;
  LanguagePool pool(g);
  EXPECT_EQ(pool.strings_of_length(4).size(), 4u);  // nested forms excluded
}

TEST(Enumeration, BudgetGuards) {
  Grammar g = build_grammar("palindrome");
  LanguagePool pool(g, 1000);
  EXPECT_THROW(pool.strings_of_length(12), std::runtime_error);  // 10^6 strings
}

TEST(FileFormats, CorpusRoundTripIsExact) {
  Grammar g = build_grammar("dyck2");
  Corpus c = sample_corpus(g, 50, 3);
  corrupt_corpus(c, g, 3);
  std::string path = temp_path("corpus_roundtrip.txt");
  write_corpus(path, g, c);
  Corpus back = read_corpus(path, g);
  ASSERT_EQ(back.positive.size(), c.positive.size());
  ASSERT_EQ(back.negative.size(), c.negative.size());
  for (std::size_t i = 0; i < c.positive.size(); ++i) {
    EXPECT_EQ(back.positive[i].tokens, c.positive[i].tokens);
    EXPECT_EQ(back.positive[i].gold_pairs, c.positive[i].gold_pairs);
  }
  for (std::size_t i = 0; i < c.negative.size(); ++i) EXPECT_EQ(back.negative[i].tokens, c.negative[i].tokens);

  // byte-exact when re-serialized
  std::string path2 = temp_path("corpus_roundtrip2.txt");
  write_corpus(path2, g, back);
  std::ifstream f1(path), f2(path2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  EXPECT_EQ(s1.str(), s2.str());
}

TEST(FileFormats, GrammarRoundTrip) {
  for (const std::string& name : {"identity_rule", "dyck2", "palindrome"}) {
    Grammar g = build_grammar(name);
    std::string path = temp_path("grammar_" + name + ".txt");
    write_grammar(path, g);
    Grammar back = read_grammar(path);
    EXPECT_EQ(back.name, g.name);
    EXPECT_EQ(back.alphabet, g.alphabet);
    EXPECT_EQ(back.max_length, g.max_length);
    EXPECT_EQ(back.max_depth, g.max_depth);
    EXPECT_EQ(back.static_map, g.static_map);
    EXPECT_EQ(back.homomorphism, g.homomorphism);
    ASSERT_EQ(back.productions.size(), g.productions.size());
    for (std::size_t i = 0; i < g.productions.size(); ++i) {
      EXPECT_EQ(back.productions[i].lhs, g.productions[i].lhs);
      EXPECT_EQ(back.productions[i].rhs, g.productions[i].rhs);
      EXPECT_DOUBLE_EQ(back.productions[i].prob, g.productions[i].prob);
    }
    EXPECT_EQ(grammar_to_text(back), grammar_to_text(g));
  }
}

TEST(FileFormats, CustomGrammarSamplesAndEnumerates) {
  // a^n b^n
  std::string path = temp_path("anbn.txt");
  {
    std::ofstream out(path);
    out << "# grammar anbn\n# alphabet a b\n# max_length 12\n";
    out << "S -> a S b : 0.6\nS -> a b : 0.4\n";
  }
  GrammarParams p;
  p.custom_file = path;
  Grammar g = build_grammar("custom", p);
  Corpus c = sample_corpus(g, 100, 9);
  for (const CorpusItem& item : c.positive) {
    const int n = static_cast<int>(item.tokens.size());
    for (int i = 0; i < n; ++i) EXPECT_EQ(item.tokens[static_cast<std::size_t>(i)], i < n / 2 ? 0 : 1);
  }
  LanguagePool pool(g);
  EXPECT_EQ(pool.strings_of_length(6).size(), 1u);
  EXPECT_EQ(pool.strings_of_length(5).size(), 0u);
}
