#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fidam/grammar.hpp"
#include "fidam/model.hpp"
#include "fidam/rng.hpp"
#include "fidam/tensor.hpp"

namespace fidam {

// Set of token positions still present in a partial input.
struct FeatureSubset {
  std::uint32_t present = 0;
  int n = 0;

  static FeatureSubset of(std::uint32_t mask, int n) { return {mask, n}; }
  static FeatureSubset all(int n) { return {n >= 32 ? ~0u : ((1u << n) - 1u), n}; }
  static FeatureSubset none(int n) { return {0u, n}; }
  bool has(int i) const { return (present >> i) & 1u; }
  FeatureSubset without(int i) const { return {present & ~(1u << i), n}; }
  FeatureSubset with(int i) const { return {present | (1u << i), n}; }
  bool is_full() const { return present == all(n).present; }
};

enum class BaselineKind {
  kStaticZero,
  kStaticMap,
  kStaticTokens,  // an explicit replacement string (expected-explanation draws)
  kExpectedPos,
  kExpectedNeg,
  kIntervUnigram,
  kIntervPositional,
  kIntervJoint,
  kObservational,
  kNone,  // methods that take no baseline (Hessian family)
};

inline const char* baseline_kind_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::kStaticZero: return "zero";
    case BaselineKind::kStaticMap: return "static_map";
    case BaselineKind::kStaticTokens: return "static_tokens";
    case BaselineKind::kExpectedPos: return "expected_pos";
    case BaselineKind::kExpectedNeg: return "expected_neg";
    case BaselineKind::kIntervUnigram: return "interv_unigram";
    case BaselineKind::kIntervPositional: return "interv_positional";
    case BaselineKind::kIntervJoint: return "interv_joint";
    case BaselineKind::kObservational: return "observational";
    case BaselineKind::kNone: return "none";
  }
  return "?";
}

inline BaselineKind baseline_kind_from_name(const std::string& s) {
  for (BaselineKind k : {BaselineKind::kStaticZero, BaselineKind::kStaticMap, BaselineKind::kStaticTokens,
                         BaselineKind::kExpectedPos, BaselineKind::kExpectedNeg, BaselineKind::kIntervUnigram,
                         BaselineKind::kIntervPositional, BaselineKind::kIntervJoint, BaselineKind::kObservational,
                         BaselineKind::kNone})
    if (s == baseline_kind_name(k)) return k;
  throw std::invalid_argument("unknown baseline '" + s + "'");
}

// Model outputs over enumerated pool strings, shareable across items and
// workers once built.
struct PoolOutputs {
  std::map<int, std::vector<double>> by_length;
};

struct BaselineSpec {
  BaselineKind kind = BaselineKind::kStaticZero;
  int samples = 100;               // Monte-Carlo draws for stochastic kinds
  TokenSeq tokens;                 // kStaticTokens replacement string
  bool length_match = true;        // restrict joint/background draws to |x|
  bool observational_exact_mean = true;

  bool is_static() const {
    return kind == BaselineKind::kStaticZero || kind == BaselineKind::kStaticMap ||
           kind == BaselineKind::kStaticTokens;
  }
  bool is_expected() const { return kind == BaselineKind::kExpectedPos || kind == BaselineKind::kExpectedNeg; }
  bool is_stochastic() const {
    return kind == BaselineKind::kIntervUnigram || kind == BaselineKind::kIntervPositional ||
           kind == BaselineKind::kIntervJoint || kind == BaselineKind::kObservational;
  }
};

// Uniform draw among pool strings of length |x| that agree with x on every
// present position; returns the completion (the full string). Empty match
// sets signal the caller to fall back.
inline bool observational_complete(const TokenSeq& x, FeatureSubset S, LanguagePool& pool, Rng& rng,
                                   TokenSeq& out) {
  const auto& candidates = pool.strings_of_length(static_cast<int>(x.size()));
  std::vector<const TokenSeq*> matches;
  for (const TokenSeq& p : candidates) {
    bool ok = true;
    for (int i = 0; i < S.n && ok; ++i)
      if (S.has(i) && p[static_cast<std::size_t>(i)] != x[static_cast<std::size_t>(i)]) ok = false;
    if (ok) matches.push_back(&p);
  }
  if (matches.empty()) return false;
  out = *matches[rng.next_below(matches.size())];
  return true;
}

// v(x_S): the model output on a partial input, absent features filled by the
// configured removal strategy. Holds per-instance scratch (a PrimalModel), so
// each worker takes its own copy.
class ValueFunction {
 public:
  ValueFunction(const Checkpoint& ckpt, const Grammar& grammar, BaselineSpec spec,
                OutputScalar out = OutputScalar::kLogitWellFormed)
      : ckpt_(&ckpt), grammar_(&grammar), spec_(std::move(spec)), out_(out), model_(ckpt) {
    if (spec_.kind == BaselineKind::kStaticMap && !grammar.has_static_map())
      throw std::invalid_argument("static_map baseline requires the grammar to define a token map");
    if (spec_.is_stochastic() && spec_.samples < 1)
      throw std::invalid_argument("stochastic baselines require samples >= 1");
  }

  const BaselineSpec& spec() const { return spec_; }
  OutputScalar output_mode() const { return out_; }
  const Checkpoint& checkpoint() const { return *ckpt_; }
  const Grammar& grammar() const { return *grammar_; }

  // Background corpus for interventional kinds (training split by default).
  void set_background(std::vector<const CorpusItem*> items) {
    background_ = std::move(items);
    unigram_.clear();
    positional_.clear();
    by_length_.clear();
    const int v = static_cast<int>(grammar_->alphabet.size());
    unigram_.assign(static_cast<std::size_t>(v), 0.0);
    for (const CorpusItem* item : background_) {
      for (std::size_t i = 0; i < item->tokens.size(); ++i) {
        ++unigram_[static_cast<std::size_t>(item->tokens[i])];
        if (positional_.size() <= i) positional_.resize(i + 1, std::vector<double>(static_cast<std::size_t>(v), 0.0));
        ++positional_[i][static_cast<std::size_t>(item->tokens[i])];
      }
      by_length_[static_cast<int>(item->tokens.size())].push_back(item);
    }
  }

  void set_pool(LanguagePool* pool, const PoolOutputs* shared = nullptr) {
    pool_ = pool;
    shared_pool_outputs_ = shared;
  }
  LanguagePool* pool() const { return pool_; }

  const std::vector<const CorpusItem*>& background() const { return background_; }

  const std::vector<const CorpusItem*>& background_of_length(int len) const {
    static const std::vector<const CorpusItem*> empty;
    auto it = by_length_.find(len);
    return it == by_length_.end() ? empty : it->second;
  }

  // Model output on pool strings of one length; shared across items.
  const std::vector<double>& pool_outputs(int len) {
    if (shared_pool_outputs_) {
      auto sit = shared_pool_outputs_->by_length.find(len);
      if (sit != shared_pool_outputs_->by_length.end()) return sit->second;
    }
    auto it = pool_values_.find(len);
    if (it != pool_values_.end()) return it->second;
    if (!pool_) throw std::runtime_error("observational baseline requires an enumerated language pool");
    const auto& strings = pool_->strings_of_length(len);
    std::vector<double> vals;
    vals.reserve(strings.size());
    for (const TokenSeq& s : strings) vals.push_back(select_output(model_.logits(s), out_));
    return pool_values_.emplace(len, std::move(vals)).first->second;
  }

  // Builds shared pool outputs for the given lengths (call before fanning
  // out read-only copies to workers).
  static void prewarm(PoolOutputs& target, LanguagePool& pool, const Checkpoint& ckpt, OutputScalar out,
                      const std::vector<int>& lengths) {
    PrimalModel model(ckpt);
    for (int len : lengths) {
      if (target.by_length.count(len)) continue;
      const auto& strings = pool.strings_of_length(len);
      std::vector<double> vals;
      vals.reserve(strings.size());
      for (const TokenSeq& s : strings) vals.push_back(select_output(model.logits(s), out));
      target.by_length.emplace(len, std::move(vals));
    }
  }

  int observational_fallbacks() const { return observational_fallbacks_; }

  // Evaluate v(x_S). Deterministic in (x, S, seed) regardless of call order.
  double value(const TokenSeq& x, FeatureSubset S, std::uint64_t seed) {
    const int n = static_cast<int>(x.size());
    if (S.n != n) throw std::invalid_argument("value: subset sized for a different input");
    if (S.is_full()) {
      // Removing nothing is baseline-independent.
      return select_output(model_.logits(x), out_);
    }
    switch (spec_.kind) {
      case BaselineKind::kStaticZero: {
        Tensor<double> E = model_.lookup(x);
        for (int i = 0; i < n; ++i)
          if (!S.has(i))
            for (int c = 0; c < E.cols(); ++c) E.at(i, c) = 0.0;
        return select_output(model_.logits_from_embeddings(E), out_);
      }
      case BaselineKind::kStaticMap: {
        TokenSeq t = x;
        for (int i = 0; i < n; ++i)
          if (!S.has(i)) t[static_cast<std::size_t>(i)] = grammar_->map_token(t[static_cast<std::size_t>(i)]);
        return select_output(model_.logits(t), out_);
      }
      case BaselineKind::kStaticTokens: {
        if (static_cast<int>(spec_.tokens.size()) != n)
          throw std::invalid_argument("static baseline string does not match input length");
        TokenSeq t = x;
        for (int i = 0; i < n; ++i)
          if (!S.has(i)) t[static_cast<std::size_t>(i)] = spec_.tokens[static_cast<std::size_t>(i)];
        return select_output(model_.logits(t), out_);
      }
      case BaselineKind::kIntervUnigram:
      case BaselineKind::kIntervPositional:
      case BaselineKind::kIntervJoint:
        return interventional_value(x, S, seed);
      case BaselineKind::kObservational:
        return observational_value(x, S, seed);
      case BaselineKind::kExpectedPos:
      case BaselineKind::kExpectedNeg:
        throw std::logic_error("expected baselines average whole attributions; use expected_attribution");
      case BaselineKind::kNone:
        throw std::logic_error("baseline-free methods do not evaluate a value function");
    }
    throw std::logic_error("unreachable");
  }

 private:
  Rng subset_rng(FeatureSubset S, std::uint64_t seed) const {
    return Rng(hash_combine(seed, S.present)).split(0x76616c);
  }

  int draw_from(const std::vector<double>& weights, Rng& rng) const {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = rng.next_double() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return static_cast<int>(i);
      u -= weights[i];
    }
    return static_cast<int>(weights.size()) - 1;
  }

  double interventional_value(const TokenSeq& x, FeatureSubset S, std::uint64_t seed) {
    if (background_.empty()) throw std::runtime_error("interventional baseline requires a background corpus");
    const int n = static_cast<int>(x.size());
    Rng rng = subset_rng(S, seed);
    const std::vector<const CorpusItem*>* joint_pool = nullptr;
    if (spec_.kind == BaselineKind::kIntervJoint) {
      joint_pool = &background_of_length(n);
      if (joint_pool->empty())
        throw std::runtime_error("no length-matched background strings for the joint interventional baseline");
    }
    double acc = 0.0;
    TokenSeq t = x;
    for (int s = 0; s < spec_.samples; ++s) {
      if (joint_pool) {
        const CorpusItem* drawn = (*joint_pool)[rng.next_below(joint_pool->size())];
        for (int i = 0; i < n; ++i)
          if (!S.has(i)) t[static_cast<std::size_t>(i)] = drawn->tokens[static_cast<std::size_t>(i)];
      } else {
        for (int i = 0; i < n; ++i) {
          if (S.has(i)) continue;
          const std::vector<double>& dist = spec_.kind == BaselineKind::kIntervUnigram
                                                ? unigram_
                                                : positional_.at(static_cast<std::size_t>(i));
          t[static_cast<std::size_t>(i)] = draw_from(dist, rng);
        }
      }
      acc += select_output(model_.logits(t), out_);
    }
    return acc / spec_.samples;
  }

  double observational_value(const TokenSeq& x, FeatureSubset S, std::uint64_t seed) {
    if (!pool_) throw std::runtime_error("observational baseline requires an enumerated language pool");
    Rng rng = subset_rng(S, seed);
    // A completion agreeing with x on S *is* the substituted string, so the
    // sampled mean is just an average of precomputed pool outputs.
    const auto& strings = pool_->strings_of_length(static_cast<int>(x.size()));
    const auto& values = pool_outputs(static_cast<int>(x.size()));
    std::vector<std::size_t> matches;
    for (std::size_t k = 0; k < strings.size(); ++k) {
      const TokenSeq& p = strings[k];
      bool ok = true;
      for (int i = 0; i < S.n && ok; ++i)
        if (S.has(i) && p[static_cast<std::size_t>(i)] != x[static_cast<std::size_t>(i)]) ok = false;
      if (ok) matches.push_back(k);
    }
    if (matches.empty()) {
      ++observational_fallbacks_;
      BaselineKind saved = spec_.kind;
      spec_.kind = BaselineKind::kIntervJoint;
      double v = interventional_value(x, S, seed);
      spec_.kind = saved;
      return v;
    }
    if (spec_.observational_exact_mean || static_cast<int>(matches.size()) <= spec_.samples) {
      double acc = 0.0;
      for (std::size_t k : matches) acc += values[k];
      return acc / static_cast<double>(matches.size());
    }
    double acc = 0.0;
    for (int s = 0; s < spec_.samples; ++s) acc += values[matches[rng.next_below(matches.size())]];
    return acc / spec_.samples;
  }

  const Checkpoint* ckpt_;
  const Grammar* grammar_;
  BaselineSpec spec_;
  OutputScalar out_;
  PrimalModel model_;
  std::vector<const CorpusItem*> background_;
  std::vector<double> unigram_;
  std::vector<std::vector<double>> positional_;
  std::map<int, std::vector<const CorpusItem*>> by_length_;
  std::map<int, std::vector<double>> pool_values_;
  LanguagePool* pool_ = nullptr;
  const PoolOutputs* shared_pool_outputs_ = nullptr;
  int observational_fallbacks_ = 0;
};

// Memoizes v over subset bitmasks for one (input, seed) evaluation context.
// Coalition methods share subsets heavily; this is the dominant cost lever.
// For the observational exact mean the whole table is built upfront with a
// superset-sum transform over the pool's agreement masks.
class ValueCache {
 public:
  ValueCache(ValueFunction& vf, TokenSeq x, std::uint64_t seed)
      : vf_(&vf), x_(std::move(x)), seed_(seed), n_(static_cast<int>(x_.size())) {
    if (n_ > 25) throw std::invalid_argument("value cache supports up to 25 positions");
    const std::size_t slots = std::size_t{1} << n_;
    if (vf.spec().kind == BaselineKind::kObservational && vf.spec().observational_exact_mean) {
      build_observational_tables();
    }
    memo_.assign(slots, 0.0);
    known_.assign(slots, 0);
  }

  int n() const { return n_; }
  const TokenSeq& input() const { return x_; }
  ValueFunction& vf() { return *vf_; }
  std::string baseline_name() const { return baseline_kind_name(vf_->spec().kind); }
  bool is_static_baseline() const { return vf_->spec().is_static(); }

  double operator()(std::uint32_t mask) {
    if (known_[mask]) return memo_[mask];
    double v;
    if (!obs_cnt_.empty() && mask != FeatureSubset::all(n_).present) {
      if (obs_cnt_[mask] > 0) {
        v = obs_sum_[mask] / obs_cnt_[mask];
      } else {
        v = vf_->value(x_, FeatureSubset::of(mask, n_), seed_);  // falls back internally
      }
    } else {
      v = vf_->value(x_, FeatureSubset::of(mask, n_), seed_);
    }
    memo_[mask] = v;
    known_[mask] = 1;
    return v;
  }

  std::size_t evaluations() const {
    std::size_t c = 0;
    for (char k : known_) c += static_cast<unsigned char>(k);
    return c;
  }

 private:
  void build_observational_tables() {
    LanguagePool* pool = vf_->pool();
    if (!pool) throw std::runtime_error("observational baseline requires an enumerated language pool");
    const auto& strings = pool->strings_of_length(n_);
    const auto& values = vf_->pool_outputs(n_);
    const std::size_t slots = std::size_t{1} << n_;
    obs_sum_.assign(slots, 0.0);
    obs_cnt_.assign(slots, 0);
    for (std::size_t k = 0; k < strings.size(); ++k) {
      std::uint32_t agree = 0;
      for (int i = 0; i < n_; ++i)
        if (strings[k][static_cast<std::size_t>(i)] == x_[static_cast<std::size_t>(i)]) agree |= (1u << i);
      obs_sum_[agree] += values[k];
      obs_cnt_[agree] += 1;
    }
    // superset sums: g[S] = sum over masks T >= S of h[T]
    for (int b = 0; b < n_; ++b) {
      const std::uint32_t bit = 1u << b;
      for (std::uint32_t m = 0; m < slots; ++m) {
        if (!(m & bit)) {
          obs_sum_[m] += obs_sum_[m | bit];
          obs_cnt_[m] += obs_cnt_[m | bit];
        }
      }
    }
  }

  ValueFunction* vf_;
  TokenSeq x_;
  std::uint64_t seed_;
  int n_;
  std::vector<double> memo_;
  std::vector<char> known_;
  std::vector<double> obs_sum_;
  std::vector<int> obs_cnt_;
};

// Length-matched background draws for expected explanations.
inline std::vector<TokenSeq> draw_background_strings(const std::vector<const CorpusItem*>& background, int length,
                                                     int samples, bool length_match, Rng& rng) {
  std::vector<const CorpusItem*> pool;
  if (length_match) {
    for (const CorpusItem* item : background)
      if (static_cast<int>(item->tokens.size()) == length) pool.push_back(item);
  } else {
    pool = background;
  }
  if (pool.empty()) throw std::runtime_error("background is empty after length matching");
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) out.push_back(pool[rng.next_below(pool.size())]->tokens);
  return out;
}

}  // namespace fidam
