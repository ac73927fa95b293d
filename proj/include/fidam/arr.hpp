#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fidam/grammar.hpp"
#include "fidam/methods.hpp"
#include "fidam/model.hpp"
#include "fidam/removal.hpp"

namespace fidam {

// ---------------------------------------------------------------------------
// Average Relative Rank

struct ArrConfig {
  bool include_diagonal = true;  // include diagonal cells when the method defines them
  bool magnitude = false;        // rank |score| instead of signed scores
};

// Fractional (mean-of-ties) relative rank of cell (row, col) within its row,
// 0 for the lowest score and 1 for the highest.
inline double relative_rank(const InteractionMatrix& m, int row, int col, const ArrConfig& cfg) {
  const bool with_diag = m.diagonal_defined && cfg.include_diagonal;
  auto score = [&](int j) {
    const double s = m.at(row, j);
    return cfg.magnitude ? std::abs(s) : s;
  };
  const double target = score(col);
  int less = 0, equal = 0, count = 0;
  for (int j = 0; j < m.n; ++j) {
    if (j == row && !with_diag) continue;
    ++count;
    const double s = score(j);
    if (s < target) ++less;
    else if (s == target) ++equal;
  }
  if (count <= 1) return 1.0;  // a single candidate is vacuously ranked highest
  const double rank = less + 0.5 * (equal - 1);
  return rank / (count - 1);
}

// Eq-style ARR over a set of unordered gold pairs; each pair is read in both
// row orientations and averaged.
inline double arr(const InteractionMatrix& m, const PairSet& gold, const ArrConfig& cfg = {}) {
  if (gold.empty()) throw std::invalid_argument("arr: empty gold pair set");
  if (m.n < 2) throw std::invalid_argument("arr: need at least two positions");
  double acc = 0.0;
  for (auto [i, j] : gold) {
    if (i < 0 || j < 0 || i >= m.n || j >= m.n) throw std::invalid_argument("arr: gold pair out of range");
    acc += relative_rank(m, i, j, cfg);
    acc += relative_rank(m, j, i, cfg);
  }
  return acc / (2.0 * static_cast<double>(gold.size()));
}

// ---------------------------------------------------------------------------
// Per-item attribution across a method list with one shared value cache

struct AttributionContext {
  const Checkpoint* ckpt = nullptr;
  const Grammar* grammar = nullptr;
  std::vector<const CorpusItem*> background_pos;  // train-split positives
  std::vector<const CorpusItem*> background_neg;  // train-split negatives
  LanguagePool* pool = nullptr;
  PoolOutputs pool_outputs;  // prewarmed observational outputs
  MethodConfig method_cfg;
  OutputScalar output = OutputScalar::kLogitWellFormed;
  int samples = 100;
  bool length_match = true;
  bool observational_exact_mean = true;

  BaselineSpec spec_for(BaselineKind kind) const {
    BaselineSpec s;
    s.kind = kind;
    s.samples = samples;
    s.length_match = length_match;
    s.observational_exact_mean = observational_exact_mean;
    return s;
  }

  ValueFunction make_vf(const BaselineSpec& spec) const {
    ValueFunction vf(*ckpt, *grammar, spec, output);
    if (spec.is_stochastic()) vf.set_background(background_pos);
    if (spec.kind == BaselineKind::kObservational) vf.set_pool(pool, &pool_outputs);
    return vf;
  }
};

struct ItemAttribution {
  std::map<MethodId, InteractionMatrix> matrices;
  int observational_fallbacks = 0;
};

namespace detail {

inline InteractionMatrix subset_method_matrix(MethodId m, ValueCache& cache, const MethodConfig& cfg,
                                              std::uint64_t seed) {
  switch (m) {
    case MethodId::kGroupAblation: return group_ablation(cache);
    case MethodId::kArchipelago: return archipelago(cache, cfg);
    case MethodId::kSii: return sii_matrix(cache, cfg, seed);
    case MethodId::kStii: return stii_matrix(cache, cfg, seed);
    default: throw std::logic_error("not a subset method");
  }
}

}  // namespace detail

// Computes every requested method for one item under one baseline. Subset
// methods share a single memoized value cache per (item, draw).
inline ItemAttribution attribute_item(const AttributionContext& ctx, const TokenSeq& x,
                                      const std::vector<MethodId>& methods, BaselineKind baseline,
                                      std::uint64_t item_seed) {
  ItemAttribution out;
  const int n = static_cast<int>(x.size());
  PrimalModel model(*ctx.ckpt);

  std::vector<MethodId> subset_methods, grad_methods;
  bool want_ih = false;
  for (MethodId m : methods) {
    if (!method_supports_baseline(m, baseline)) continue;
    if (m == MethodId::kHessian || m == MethodId::kHessianXInput) grad_methods.push_back(m);
    else if (m == MethodId::kIntegratedHessians) want_ih = true;
    else subset_methods.push_back(m);
  }

  for (MethodId m : grad_methods) {
    InteractionMatrix mat = m == MethodId::kHessian ? hessian_matrix(*ctx.ckpt, x, ctx.method_cfg, ctx.output)
                                                    : hessian_x_input_matrix(*ctx.ckpt, x, ctx.method_cfg, ctx.output);
    out.matrices.emplace(m, std::move(mat));
  }
  if (subset_methods.empty() && !want_ih) return out;

  const BaselineSpec base_spec = ctx.spec_for(baseline);
  auto ih_baseline_embeddings = [&](const BaselineSpec& spec) {
    if (spec.kind == BaselineKind::kStaticZero) return Tensor<double>({n, ctx.ckpt->config.embed_dim()});
    TokenSeq t = x;
    if (spec.kind == BaselineKind::kStaticMap) {
      for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = ctx.grammar->map_token(t[static_cast<std::size_t>(i)]);
    } else {
      t = spec.tokens;
    }
    return model.lookup(t);
  };

  if (base_spec.is_expected()) {
    const auto& bg = base_spec.kind == BaselineKind::kExpectedPos ? ctx.background_pos : ctx.background_neg;
    Rng draw_rng = Rng(item_seed).split(0x647261);
    std::vector<TokenSeq> draws = draw_background_strings(bg, n, ctx.samples, ctx.length_match, draw_rng);

    std::map<MethodId, InteractionMatrix> sums;
    for (std::size_t k = 0; k < draws.size(); ++k) {
      BaselineSpec draw_spec = ctx.spec_for(BaselineKind::kStaticTokens);
      draw_spec.tokens = draws[k];
      ValueFunction vf = ctx.make_vf(draw_spec);
      ValueCache cache(vf, x, hash_combine(item_seed, k));
      for (MethodId m : subset_methods) {
        InteractionMatrix mat = detail::subset_method_matrix(m, cache, ctx.method_cfg, hash_combine(item_seed, k));
        auto it = sums.find(m);
        if (it == sums.end()) {
          sums.emplace(m, std::move(mat));
        } else {
          for (std::size_t c = 0; c < mat.scores.size(); ++c) it->second.scores[c] += mat.scores[c];
        }
      }
      if (want_ih) {
        InteractionMatrix mat = integrated_hessians(*ctx.ckpt, x, ih_baseline_embeddings(draw_spec), ctx.method_cfg,
                                                    ctx.output);
        auto it = sums.find(MethodId::kIntegratedHessians);
        if (it == sums.end()) {
          sums.emplace(MethodId::kIntegratedHessians, std::move(mat));
        } else {
          for (std::size_t c = 0; c < mat.scores.size(); ++c) it->second.scores[c] += mat.scores[c];
        }
      }
    }
    for (auto& [m, mat] : sums) {
      for (double& s : mat.scores) s /= static_cast<double>(draws.size());
      mat.baseline = baseline_kind_name(baseline);
      out.matrices.emplace(m, std::move(mat));
    }
    return out;
  }

  if (!subset_methods.empty()) {
    ValueFunction vf = ctx.make_vf(base_spec);
    ValueCache cache(vf, x, item_seed);
    for (MethodId m : subset_methods) {
      InteractionMatrix mat = detail::subset_method_matrix(m, cache, ctx.method_cfg, item_seed);
      mat.baseline = baseline_kind_name(baseline);
      out.matrices.emplace(m, std::move(mat));
    }
    out.observational_fallbacks += vf.observational_fallbacks();
  }
  if (want_ih) {
    InteractionMatrix mat =
        integrated_hessians(*ctx.ckpt, x, ih_baseline_embeddings(base_spec), ctx.method_cfg, ctx.output);
    mat.baseline = baseline_kind_name(baseline);
    out.matrices.emplace(MethodId::kIntegratedHessians, std::move(mat));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus-level evaluation

struct EvalOptions {
  bool include_corrupted = false;  // evaluate ARR on corrupted test items too
  int subsample = 0;               // 0 = every eligible item
  int max_item_length = 0;         // 0 = no limit
  std::uint64_t seed = 0;
  int jobs = 1;
  ArrConfig arr;
};

struct CellResult {
  bool ok = false;
  std::string error;
  double mean_arr = 0.0;
  int items = 0;
  int fallbacks = 0;
  std::vector<double> per_item;
};

struct ARRReport {
  std::vector<std::string> method_order;
  std::vector<std::string> baseline_order;
  std::map<std::string, std::map<std::string, CellResult>> grid;  // method -> baseline -> cell
  std::map<std::string, std::string> meta;
};

// Evaluation items: well-formed test-split entries by default (gold pairs are
// grammar-defined on well-formed strings), deterministically subsampled.
inline std::vector<int> evaluation_items(const Corpus& corpus, const EvalOptions& opt) {
  std::vector<int> eligible;
  const int p = static_cast<int>(corpus.positive.size());
  for (int idx : corpus.test_idx) {
    const CorpusItem& item = corpus.item(idx);
    if (!opt.include_corrupted && !item.well_formed) continue;
    if (opt.max_item_length > 0 && static_cast<int>(item.tokens.size()) > opt.max_item_length) continue;
    if (item.gold_pairs.empty()) continue;
    if (static_cast<int>(item.tokens.size()) < 2) continue;
    (void)p;
    eligible.push_back(idx);
  }
  if (opt.subsample > 0 && static_cast<int>(eligible.size()) > opt.subsample) {
    Rng rng = Rng(opt.seed).split(0x737562);
    rng.shuffle(eligible);
    eligible.resize(static_cast<std::size_t>(opt.subsample));
    std::sort(eligible.begin(), eligible.end());
  }
  return eligible;
}

namespace detail {

// Deterministic parallel map: results land in slot `i` regardless of which
// worker computed them.
template <class Fn>
void parallel_for(int count, int jobs, Fn&& fn) {
  if (jobs <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  const int n_workers = std::min(jobs, count);
  workers.reserve(static_cast<std::size_t>(n_workers));
  for (int w = 0; w < n_workers; ++w) {
    workers.emplace_back([&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= count) return;
        fn(i);
      }
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace detail

// Evaluates one (method-set, baseline) cell group over the evaluation items.
// Returns per-method results keyed the same way the report stores them.
inline std::map<MethodId, CellResult> evaluate_cell_group(AttributionContext& ctx, const Corpus& corpus,
                                                          const std::vector<MethodId>& methods, BaselineKind baseline,
                                                          const EvalOptions& opt) {
  if (!ctx.ckpt->training.converged)
    throw NonConvergenceError("evaluation refuses a non-converged checkpoint");
  std::vector<int> items = evaluation_items(corpus, opt);
  std::map<MethodId, CellResult> results;
  std::vector<MethodId> supported;
  for (MethodId m : methods)
    if (method_supports_baseline(m, baseline)) supported.push_back(m);
  if (supported.empty() || items.empty()) return results;

  struct PerItem {
    std::map<MethodId, double> arrs;
    int fallbacks = 0;
  };
  std::vector<PerItem> rows(items.size());

  // Pool outputs must exist before workers share the pool read-only.
  if (baseline == BaselineKind::kObservational && ctx.pool) {
    std::vector<int> lengths;
    for (int idx : items) lengths.push_back(static_cast<int>(corpus.item(idx).tokens.size()));
    std::sort(lengths.begin(), lengths.end());
    lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
    ValueFunction::prewarm(ctx.pool_outputs, *ctx.pool, *ctx.ckpt, ctx.output, lengths);
  }

  detail::parallel_for(static_cast<int>(items.size()), opt.jobs, [&](int k) {
    const CorpusItem& item = corpus.item(items[static_cast<std::size_t>(k)]);
    const std::uint64_t item_seed = hash_combine(opt.seed, static_cast<std::uint64_t>(items[static_cast<std::size_t>(k)]));
    ItemAttribution att = attribute_item(ctx, item.tokens, supported, baseline, item_seed);
    for (const auto& [m, mat] : att.matrices)
      rows[static_cast<std::size_t>(k)].arrs[m] = arr(mat, item.gold_pairs, opt.arr);
    rows[static_cast<std::size_t>(k)].fallbacks = att.observational_fallbacks;
  });

  for (MethodId m : supported) {
    CellResult cell;
    cell.ok = true;
    for (const PerItem& row : rows) {
      auto it = row.arrs.find(m);
      if (it == row.arrs.end()) continue;
      cell.per_item.push_back(it->second);
      cell.mean_arr += it->second;
      cell.fallbacks += row.fallbacks;
      ++cell.items;
    }
    if (cell.items > 0) cell.mean_arr /= cell.items;
    results.emplace(m, std::move(cell));
  }
  return results;
}

// Mean ARR for a single (method, baseline) pair.
inline CellResult evaluate_corpus(AttributionContext& ctx, const Corpus& corpus, MethodId method,
                                  BaselineKind baseline, const EvalOptions& opt) {
  auto cells = evaluate_cell_group(ctx, corpus, {method}, baseline, opt);
  auto it = cells.find(method);
  if (it == cells.end()) {
    CellResult missing;
    missing.error = "unsupported method/baseline combination";
    return missing;
  }
  return it->second;
}

// Full grid. Unsupported combinations stay absent; a failing cell records its
// error without aborting the rest of the run.
inline ARRReport run_grid(AttributionContext& ctx, const Corpus& corpus, const std::vector<MethodId>& methods,
                          const std::vector<BaselineKind>& baselines, const EvalOptions& opt) {
  ARRReport report;
  for (MethodId m : methods) report.method_order.push_back(method_name(m));
  for (BaselineKind b : baselines) report.baseline_order.push_back(baseline_kind_name(b));
  for (BaselineKind b : baselines) {
    std::vector<MethodId> supported;
    for (MethodId m : methods)
      if (method_supports_baseline(m, b)) supported.push_back(m);
    if (supported.empty()) continue;
    try {
      auto cells = evaluate_cell_group(ctx, corpus, supported, b, opt);
      for (auto& [m, cell] : cells) report.grid[method_name(m)][baseline_kind_name(b)] = std::move(cell);
    } catch (const NonConvergenceError&) {
      throw;  // refusing the checkpoint is not a per-cell failure
    } catch (const std::exception& e) {
      for (MethodId m : supported) {
        CellResult cell;
        cell.error = e.what();
        report.grid[method_name(m)][baseline_kind_name(b)] = cell;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report emitters

inline std::string arr_cell_text(const CellResult& cell) {
  if (!cell.ok) return "--";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", cell.mean_arr);
  return buf;
}

inline std::string report_to_csv(const ARRReport& report) {
  std::string out = "method";
  for (const std::string& b : report.baseline_order) out += "," + b;
  out += "\n";
  for (const std::string& m : report.method_order) {
    out += m;
    auto row = report.grid.find(m);
    for (const std::string& b : report.baseline_order) {
      out += ",";
      if (row != report.grid.end()) {
        auto cell = row->second.find(b);
        out += cell == row->second.end() ? "--" : arr_cell_text(cell->second);
      } else {
        out += "--";
      }
    }
    out += "\n";
  }
  return out;
}

inline std::string report_to_markdown(const ARRReport& report) {
  std::string out = "| method |";
  for (const std::string& b : report.baseline_order) out += " " + b + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < report.baseline_order.size(); ++i) out += "---|";
  out += "\n";
  for (const std::string& m : report.method_order) {
    out += "| " + m + " |";
    auto row = report.grid.find(m);
    for (const std::string& b : report.baseline_order) {
      std::string cell = "--";
      if (row != report.grid.end()) {
        auto it = row->second.find(b);
        if (it != row->second.end()) cell = arr_cell_text(it->second);
      }
      out += " " + cell + " |";
    }
    out += "\n";
  }
  return out;
}

}  // namespace fidam
