#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fidam/model.hpp"
#include "fidam/removal.hpp"
#include "fidam/rng.hpp"

namespace fidam {

struct InteractionMatrix {
  int n = 0;
  std::vector<double> scores;
  std::string method;
  std::string baseline;
  bool diagonal_defined = false;

  InteractionMatrix() = default;
  InteractionMatrix(int size, std::string method_name)
      : n(size), scores(static_cast<std::size_t>(size) * size, 0.0), method(std::move(method_name)) {}

  double& at(int i, int j) { return scores[static_cast<std::size_t>(i) * n + j]; }
  double at(int i, int j) const { return scores[static_cast<std::size_t>(i) * n + j]; }
};

struct MethodConfig {
  int exact_cap = 14;                   // exact coalition sums permitted up to this many positions
  std::string coalition_mode = "auto";  // auto | exact | sampled
  int permutations = 2000;              // sampled coalitions per pair
  int ih_steps = 64;                    // Riemann grid resolution per axis
  int stii_order = 2;
  double archipelago_threshold = 0.2;   // fraction of pair strengths promoted to sets
  std::string hessian_aggregation = "sum_square";  // sum_square | sum_of_squares
};

enum class MethodId {
  kGroupAblation,
  kArchipelago,
  kSii,
  kStii,
  kHessian,
  kHessianXInput,
  kIntegratedHessians,
};

inline const char* method_name(MethodId m) {
  switch (m) {
    case MethodId::kGroupAblation: return "group_ablation";
    case MethodId::kArchipelago: return "archipelago";
    case MethodId::kSii: return "sii";
    case MethodId::kStii: return "stii";
    case MethodId::kHessian: return "hessian";
    case MethodId::kHessianXInput: return "hessian_x_input";
    case MethodId::kIntegratedHessians: return "integrated_hessians";
  }
  return "?";
}

inline MethodId method_from_name(const std::string& s) {
  for (MethodId m : {MethodId::kGroupAblation, MethodId::kArchipelago, MethodId::kSii, MethodId::kStii,
                     MethodId::kHessian, MethodId::kHessianXInput, MethodId::kIntegratedHessians})
    if (s == method_name(m)) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

// Which (method, baseline) combinations are defined. The Hessian family takes
// no baseline; Archipelago and Integrated Hessians require a concrete
// replacement input, so conditional-expectation baselines are out.
inline bool method_supports_baseline(MethodId m, BaselineKind k) {
  switch (m) {
    case MethodId::kHessian:
    case MethodId::kHessianXInput:
      return k == BaselineKind::kNone;
    case MethodId::kArchipelago:
    case MethodId::kIntegratedHessians:
      return k == BaselineKind::kStaticZero || k == BaselineKind::kStaticMap || k == BaselineKind::kStaticTokens ||
             k == BaselineKind::kExpectedPos || k == BaselineKind::kExpectedNeg;
    case MethodId::kGroupAblation:
    case MethodId::kSii:
    case MethodId::kStii:
      return k != BaselineKind::kNone;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Group Ablation
//
// Scores are oriented so that a pair whose joint removal destroys the
// prediction ranks *high*: ablated-minus-full of the well-formed output.

template <class V>
InteractionMatrix group_ablation(V& v) {
  const int n = v.n();
  if (n < 2) throw std::invalid_argument("group_ablation: need at least two positions");
  InteractionMatrix out(n, "group_ablation");
  out.diagonal_defined = true;
  const std::uint32_t full = FeatureSubset::all(n).present;
  const double v_full = v(full);
  for (int i = 0; i < n; ++i) {
    out.at(i, i) = v(full & ~(1u << i)) - v_full;
    for (int j = i + 1; j < n; ++j) {
      const double score = v(full & ~(1u << i) & ~(1u << j)) - v_full;
      out.at(i, j) = score;
      out.at(j, i) = score;
    }
  }
  out.baseline = v.baseline_name();
  return out;
}

// ---------------------------------------------------------------------------
// Archipelago: detect interaction sets from pairwise non-additivity of the
// keep-only value, then score whole sets against the empty input.

template <class V>
InteractionMatrix archipelago(V& v, const MethodConfig& cfg) {
  if (!v.is_static_baseline())
    throw std::invalid_argument("archipelago requires a static (or expected-draw) baseline");
  const int n = v.n();
  InteractionMatrix out(n, "archipelago");
  out.diagonal_defined = false;
  const double f_base = v(0u);

  std::vector<double> omega(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> strengths;
  for (int i = 0; i < n; ++i) {
    const double fi = v(1u << i);
    for (int j = i + 1; j < n; ++j) {
      const double fj = v(1u << j);
      const double fij = v((1u << i) | (1u << j));
      const double w = std::abs(fij - fi - fj + f_base);
      omega[static_cast<std::size_t>(i) * n + j] = w;
      omega[static_cast<std::size_t>(j) * n + i] = w;
      strengths.push_back(w);
    }
  }

  // pairs in the top fraction become interaction sets (transitive closure)
  std::sort(strengths.begin(), strengths.end());
  const std::size_t cut = static_cast<std::size_t>(
      std::floor(static_cast<double>(strengths.size()) * (1.0 - cfg.archipelago_threshold)));
  const double threshold = std::max(strengths.empty() ? 0.0 : strengths[std::min(cut, strengths.size() - 1)], 1e-12);

  std::vector<int> parent(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = i;
  std::function<int(int)> find = [&](int a) { return parent[static_cast<std::size_t>(a)] == a ? a : parent[static_cast<std::size_t>(a)] = find(parent[static_cast<std::size_t>(a)]); };
  bool any = false;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (omega[static_cast<std::size_t>(i) * n + j] > threshold) {
        parent[static_cast<std::size_t>(find(i))] = find(j);
        any = true;
      }

  if (!any) {
    // no non-additive structure: report the raw pair strengths
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) out.at(i, j) = omega[static_cast<std::size_t>(i) * n + j];
    out.baseline = v.baseline_name();
    return out;
  }

  std::map<int, std::uint32_t> sets;
  for (int i = 0; i < n; ++i) sets[find(i)] |= (1u << i);
  double min_set_score = 0.0;
  bool first = true;
  for (const auto& [root, mask] : sets) {
    if (__builtin_popcount(mask) < 2) continue;
    const double score = v(mask) - f_base;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && (mask >> i & 1u) && (mask >> j & 1u)) out.at(i, j) = score;
    min_set_score = first ? score : std::min(min_set_score, score);
    first = false;
  }

  // cross-set cells keep their omega ordering, squeezed below every set score
  double omega_max = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && find(i) != find(j)) omega_max = std::max(omega_max, omega[static_cast<std::size_t>(i) * n + j]);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && find(i) != find(j)) {
        const double w = omega[static_cast<std::size_t>(i) * n + j];
        out.at(i, j) = min_set_score - 2.0 + (omega_max > 0.0 ? w / omega_max : 0.0);
      }
  out.baseline = v.baseline_name();
  return out;
}

// ---------------------------------------------------------------------------
// Shapley Interaction Index and Shapley-Taylor Interaction Index
//
// Delta_ij v(S) = v(S+ij) - v(S+i) - v(S+j) + v(S) for S excluding i and j.
// SII weights by |S|!(n-|S|-2)!/(n-1)! = 1/((n-1) C(n-2,|S|)); order-2 STII
// by (2/n)/C(n-1,|S|).

namespace detail {

inline std::vector<std::vector<double>> pascal_triangle(int n) {
  std::vector<std::vector<double>> c(static_cast<std::size_t>(n + 1));
  for (int i = 0; i <= n; ++i) {
    c[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(i + 1), 1.0);
    for (int j = 1; j < i; ++j)
      c[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          c[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)] +
          c[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j)];
  }
  return c;
}

template <class V>
double delta_pair(V& v, std::uint32_t s, int i, int j) {
  return v(s | (1u << i) | (1u << j)) - v(s | (1u << i)) - v(s | (1u << j)) + v(s);
}

// Uniformly random subset of the positions in `space` with exactly k bits.
inline std::uint32_t random_subset(std::uint32_t space, int k, Rng& rng, std::vector<int>& scratch) {
  scratch.clear();
  for (int b = 0; b < 32; ++b)
    if (space >> b & 1u) scratch.push_back(b);
  std::uint32_t mask = 0;
  const int m = static_cast<int>(scratch.size());
  for (int t = 0; t < k; ++t) {
    const int pick = t + rng.next_int(0, m - t);
    std::swap(scratch[static_cast<std::size_t>(t)], scratch[static_cast<std::size_t>(pick)]);
    mask |= 1u << scratch[static_cast<std::size_t>(t)];
  }
  return mask;
}

}  // namespace detail

inline bool use_exact_coalitions(int n, const MethodConfig& cfg) {
  if (cfg.coalition_mode == "exact") {
    if (n > cfg.exact_cap)
      throw std::invalid_argument("exact coalition mode requested for " + std::to_string(n) +
                                  " positions (cap " + std::to_string(cfg.exact_cap) + ")");
    return true;
  }
  if (cfg.coalition_mode == "sampled") return false;
  return n <= cfg.exact_cap;  // auto
}

template <class V>
double sii_pair(V& v, int i, int j, const MethodConfig& cfg, std::uint64_t seed) {
  const int n = v.n();
  if (i == j) throw std::invalid_argument("sii: i and j must differ");
  const std::uint32_t space = FeatureSubset::all(n).present & ~(1u << i) & ~(1u << j);
  if (use_exact_coalitions(n, cfg)) {
    auto c = detail::pascal_triangle(n);
    double acc = 0.0;
    std::uint32_t s = space;
    for (;;) {
      const int size = __builtin_popcount(s);
      const double w = 1.0 / ((n - 1) * c[static_cast<std::size_t>(n - 2)][static_cast<std::size_t>(size)]);
      acc += w * detail::delta_pair(v, s, i, j);
      if (s == 0) break;
      s = (s - 1) & space;
    }
    return acc;
  }
  // permutation-style sampling: coalition size is uniform on {0..n-2}
  Rng rng = Rng(hash_combine(seed, (static_cast<std::uint64_t>(i) << 8) | static_cast<std::uint64_t>(j))).split(1);
  std::vector<int> scratch;
  double acc = 0.0;
  for (int t = 0; t < cfg.permutations; ++t) {
    const int size = rng.next_int(0, n - 1);
    acc += detail::delta_pair(v, detail::random_subset(space, size, rng, scratch), i, j);
  }
  return acc / cfg.permutations;
}

template <class V>
double stii_pair(V& v, int i, int j, const MethodConfig& cfg, std::uint64_t seed) {
  const int n = v.n();
  if (i == j) throw std::invalid_argument("stii: i and j must differ");
  if (cfg.stii_order != 2) throw std::invalid_argument("stii: only order 2 is supported");
  const std::uint32_t space = FeatureSubset::all(n).present & ~(1u << i) & ~(1u << j);
  if (use_exact_coalitions(n, cfg)) {
    auto c = detail::pascal_triangle(n);
    double acc = 0.0;
    std::uint32_t s = space;
    for (;;) {
      const int size = __builtin_popcount(s);
      const double w = (2.0 / n) / c[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(size)];
      acc += w * detail::delta_pair(v, s, i, j);
      if (s == 0) break;
      s = (s - 1) & space;
    }
    return acc;
  }
  // importance weights: P(|S| = s) = 2 (n-1-s) / (n (n-1))
  Rng rng = Rng(hash_combine(seed, (static_cast<std::uint64_t>(i) << 8) | static_cast<std::uint64_t>(j))).split(2);
  std::vector<int> scratch;
  std::vector<double> size_weights(static_cast<std::size_t>(n - 1));
  for (int s = 0; s <= n - 2; ++s)
    size_weights[static_cast<std::size_t>(s)] = 2.0 * (n - 1 - s) / (static_cast<double>(n) * (n - 1));
  double acc = 0.0;
  for (int t = 0; t < cfg.permutations; ++t) {
    double u = rng.next_double();
    int size = n - 2;
    for (int s = 0; s <= n - 2; ++s) {
      if (u < size_weights[static_cast<std::size_t>(s)]) {
        size = s;
        break;
      }
      u -= size_weights[static_cast<std::size_t>(s)];
    }
    acc += detail::delta_pair(v, detail::random_subset(space, size, rng, scratch), i, j);
  }
  return acc / cfg.permutations;
}

// Order-1 Shapley-Taylor terms (plain marginals at the empty set).
template <class V>
std::vector<double> stii_singletons(V& v) {
  const int n = v.n();
  std::vector<double> out(static_cast<std::size_t>(n));
  const double base = v(0u);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = v(1u << i) - base;
  return out;
}

namespace detail {

// Shared full-matrix driver: exact mode iterates each pair's subset lattice
// over the memoized cache; pairs are independent.
template <class V, class PairFn>
InteractionMatrix coalition_matrix(V& v, const char* name, PairFn&& pair_fn) {
  const int n = v.n();
  if (n < 2) throw std::invalid_argument(std::string(name) + ": need at least two positions");
  InteractionMatrix out(n, name);
  out.diagonal_defined = false;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double s = pair_fn(i, j);
      out.at(i, j) = s;
      out.at(j, i) = s;
    }
  out.baseline = v.baseline_name();
  return out;
}

}  // namespace detail

template <class V>
InteractionMatrix sii_matrix(V& v, const MethodConfig& cfg, std::uint64_t seed) {
  return detail::coalition_matrix(v, "sii", [&](int i, int j) { return sii_pair(v, i, j, cfg, seed); });
}

template <class V>
InteractionMatrix stii_matrix(V& v, const MethodConfig& cfg, std::uint64_t seed) {
  return detail::coalition_matrix(v, "stii", [&](int i, int j) { return stii_pair(v, i, j, cfg, seed); });
}

// ---------------------------------------------------------------------------
// Hessian and Hessian x Input
//
// Gamma_ij = (sum_ab H[i,j][a,b])^2, or with the input weighting
// Gamma_ij = (sum_ab E_ia H[i,j][a,b] E_jb)^2. One tangent pass per position
// covers a whole column of blocks.

template <class Fn>
InteractionMatrix hessian_family_core(Fn&& fn, const Tensor<double>& E, bool times_input, const MethodConfig& cfg) {
  const int n = E.rows(), d = E.cols();
  InteractionMatrix out(n, times_input ? "hessian_x_input" : "hessian");
  out.diagonal_defined = true;
  out.baseline = "none";

  if (cfg.hessian_aggregation == "sum_of_squares") {
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        Tensor<double> block = cross_hessian_of(fn, E, i, j);
        double acc = 0.0;
        for (int a = 0; a < d; ++a)
          for (int b = 0; b < d; ++b) {
            const double term = (times_input ? E.at(i, a) * block.at(a, b) * E.at(j, b) : block.at(a, b));
            acc += term * term;
          }
        out.at(i, j) = acc;
        out.at(j, i) = acc;
      }
    return out;
  }

  std::vector<std::vector<double>> m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int j = 0; j < n; ++j) {
    Tensor<double> seed(E.shape);
    for (int b = 0; b < d; ++b) seed.at(j, b) = times_input ? E.at(j, b) : 1.0;
    SecondOrder so = hvp_of(fn, E, seed);
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int a = 0; a < d; ++a) acc += (times_input ? E.at(i, a) : 1.0) * so.hv.at(i, a);
      m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = acc;
    }
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      // enforce exact symmetry before squaring; the two triangles agree to
      // roundoff already
      const double avg = 0.5 * (m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +
                                m[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]);
      out.at(i, j) = avg * avg;
    }
  return out;
}

inline InteractionMatrix hessian_matrix(const Checkpoint& ckpt, const TokenSeq& x, const MethodConfig& cfg,
                                        OutputScalar mode) {
  PrimalModel model(ckpt);
  return hessian_family_core(model_scalar_fn(ckpt, mode), model.lookup(x), false, cfg);
}

inline InteractionMatrix hessian_x_input_matrix(const Checkpoint& ckpt, const TokenSeq& x, const MethodConfig& cfg,
                                                OutputScalar mode) {
  PrimalModel model(ckpt);
  return hessian_family_core(model_scalar_fn(ckpt, mode), model.lookup(x), true, cfg);
}

// ---------------------------------------------------------------------------
// Integrated Hessians
//
// Gamma_ij = dx_i dx_j  integral over (a,b) in [0,1]^2 of a*b*H_ij at
// x' + a*b*(x - x'); the diagonal adds the first-order path term. Midpoint
// rule on an ih_steps^2 grid; grid products collide heavily, so points are
// deduplicated with their weights accumulated.

template <class Fn>
InteractionMatrix integrated_hessians_core(Fn&& fn, const Tensor<double>& E, const Tensor<double>& baseline_embeddings,
                                           const MethodConfig& cfg) {
  if (cfg.ih_steps < 1) throw std::invalid_argument("integrated_hessians: ih_steps must be >= 1");
  if (!E.same_shape(baseline_embeddings))
    throw std::invalid_argument("integrated_hessians: baseline shape mismatch");
  const int n = E.rows(), d = E.cols();
  Tensor<double> diff(E.shape);
  for (std::size_t k = 0; k < E.data.size(); ++k) diff.data[k] = E.data[k] - baseline_embeddings.data[k];

  const int m = cfg.ih_steps;
  // alpha_k * beta_l = (2k+1)(2l+1) / (4 m^2): collect unique odd products
  std::map<long, std::pair<double, double>> points;  // product -> (hessian weight, gradient weight)
  const double cell = 1.0 / (static_cast<double>(m) * m);
  for (int k = 0; k < m; ++k)
    for (int l = 0; l < m; ++l) {
      const long o = static_cast<long>(2 * k + 1) * (2 * l + 1);
      const double ab = static_cast<double>(o) / (4.0 * m * m);
      auto& w = points[o];
      w.first += ab * cell;
      w.second += cell;
    }

  std::vector<std::vector<double>> acc(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  std::vector<double> grad_term(static_cast<std::size_t>(n), 0.0);

  Tensor<double> point(E.shape);
  for (const auto& [o, w] : points) {
    const double u = static_cast<double>(o) / (4.0 * m * m);
    for (std::size_t k = 0; k < E.data.size(); ++k)
      point.data[k] = baseline_embeddings.data[k] + u * diff.data[k];
    for (int j = 0; j < n; ++j) {
      Tensor<double> seed(E.shape);
      for (int b = 0; b < d; ++b) seed.at(j, b) = diff.at(j, b);
      SecondOrder so = hvp_of(fn, point, seed);
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int a = 0; a < d; ++a) dot += diff.at(i, a) * so.hv.at(i, a);
        acc[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += w.first * dot;
      }
      if (j == 0) {
        for (int i = 0; i < n; ++i) {
          double dot = 0.0;
          for (int a = 0; a < d; ++a) dot += diff.at(i, a) * so.grad.at(i, a);
          grad_term[static_cast<std::size_t>(i)] += w.second * dot;
        }
      }
    }
  }

  InteractionMatrix out(n, "integrated_hessians");
  out.diagonal_defined = true;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double sym = 0.5 * (acc[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +
                                acc[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]);
      out.at(i, j) = sym;
    }
    out.at(i, i) = acc[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] + grad_term[static_cast<std::size_t>(i)];
  }
  return out;
}

inline InteractionMatrix integrated_hessians(const Checkpoint& ckpt, const TokenSeq& x,
                                             const Tensor<double>& baseline_embeddings, const MethodConfig& cfg,
                                             OutputScalar mode) {
  PrimalModel model(ckpt);
  return integrated_hessians_core(model_scalar_fn(ckpt, mode), model.lookup(x), baseline_embeddings, cfg);
}

// ---------------------------------------------------------------------------
// Expected explanations: run a static-baseline method once per background
// draw and average the matrices elementwise.

template <class MatrixFn>
InteractionMatrix expected_attribution(MatrixFn&& method_with_static_baseline,
                                       const std::vector<TokenSeq>& draws) {
  if (draws.empty()) throw std::invalid_argument("expected_attribution: no background draws");
  InteractionMatrix mean;
  for (std::size_t k = 0; k < draws.size(); ++k) {
    InteractionMatrix one = method_with_static_baseline(draws[k], k);
    if (k == 0) {
      mean = one;
    } else {
      for (std::size_t c = 0; c < mean.scores.size(); ++c) mean.scores[c] += one.scores[c];
    }
  }
  for (double& s : mean.scores) s /= static_cast<double>(draws.size());
  return mean;
}

// ---------------------------------------------------------------------------
// Matrix dump format: a one-line header followed by n rows of n values.

inline std::string matrix_to_text(const InteractionMatrix& m, std::uint64_t seed) {
  std::string out = "# method=" + m.method + " baseline=" + (m.baseline.empty() ? "none" : m.baseline) +
                    " seed=" + std::to_string(seed) + " n=" + std::to_string(m.n) +
                    " diagonal=" + (m.diagonal_defined ? "1" : "0") + "\n";
  char buf[64];
  for (int i = 0; i < m.n; ++i) {
    for (int j = 0; j < m.n; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m.at(i, j));
      out += buf;
      out += (j + 1 == m.n) ? '\n' : ' ';
    }
  }
  return out;
}

inline InteractionMatrix matrix_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  InteractionMatrix m;
  auto field = [&](const std::string& key) {
    const std::size_t at = header.find(key + "=");
    if (at == std::string::npos) throw std::runtime_error("matrix header missing " + key);
    const std::size_t end = header.find(' ', at);
    return header.substr(at + key.size() + 1, end - at - key.size() - 1);
  };
  m.method = field("method");
  m.baseline = field("baseline");
  m.n = std::stoi(field("n"));
  m.diagonal_defined = field("diagonal") == "1";
  m.scores.resize(static_cast<std::size_t>(m.n) * m.n);
  for (double& v : m.scores) in >> v;
  if (!in) throw std::runtime_error("matrix body truncated");
  return m;
}

}  // namespace fidam
