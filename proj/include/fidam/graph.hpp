#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fidam/dual.hpp"
#include "fidam/tensor.hpp"

namespace fidam {

// Reverse-mode tape over dense tensors.
//
// The tape is templated on the scalar type: Tape<double> provides values and
// exact first-order gradients; Tape<Dual> run with a seeded tangent provides
// exact Hessian-vector products (forward-over-reverse). Nodes are appended in
// execution order, so the trace is topologically sorted by construction and
// replaying it is bit-deterministic.
inline constexpr double kLayerNormEps = 1e-5;

template <class S>
class Tape {
 public:
  enum class Op {
    kInput,
    kConstant,
    kMatMul,
    kAdd,
    kSub,
    kMul,
    kScale,
    kSigmoid,
    kTanh,
    kSoftmax,
    kSoftmaxRows,
    kConcat,
    kSlice,
    kGatherRows,
    kRow,
    kTranspose,
    kBroadcastRows,
    kLayerNormRows,
    kCrossEntropy,
    kSum,
  };

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    int aux0 = 0;
    int aux1 = 0;
    double scale = 1.0;
    std::vector<int> gather;  // kGatherRows row indices
    Tensor<S> value;
  };

  int input(Tensor<S> v) {
    Node n;
    n.op = Op::kInput;
    n.value = std::move(v);
    return push(std::move(n));
  }

  int constant(Tensor<S> v) {
    Node n;
    n.op = Op::kConstant;
    n.value = std::move(v);
    return push(std::move(n));
  }

  // out = A @ x, with A rank 2 and x rank 1 or 2.
  int matmul(int a, int b) {
    const Tensor<S>& A = val(a);
    const Tensor<S>& B = val(b);
    if (A.rank() != 2) throw std::invalid_argument("matmul: lhs must be rank 2");
    Node n;
    n.op = Op::kMatMul;
    n.a = a;
    n.b = b;
    if (B.rank() == 1) {
      if (A.cols() != B.dim(0)) throw std::invalid_argument("matmul: shape mismatch");
      Tensor<S> out({A.rows()});
      for (int r = 0; r < A.rows(); ++r) {
        S acc(0);
        for (int c = 0; c < A.cols(); ++c) acc += A.at(r, c) * B.at(c);
        out.at(r) = acc;
      }
      n.value = std::move(out);
    } else {
      if (A.cols() != B.rows()) throw std::invalid_argument("matmul: shape mismatch");
      Tensor<S> out({A.rows(), B.cols()});
      for (int r = 0; r < A.rows(); ++r)
        for (int k = 0; k < B.cols(); ++k) {
          S acc(0);
          for (int c = 0; c < A.cols(); ++c) acc += A.at(r, c) * B.at(c, k);
          out.at(r, k) = acc;
        }
      n.value = std::move(out);
    }
    return push(std::move(n));
  }

  int add(int a, int b) { return binary(Op::kAdd, a, b); }
  int sub(int a, int b) { return binary(Op::kSub, a, b); }
  int mul(int a, int b) { return binary(Op::kMul, a, b); }

  int scale(int a, double c) {
    Node n;
    n.op = Op::kScale;
    n.a = a;
    n.scale = c;
    n.value = val(a);
    for (S& v : n.value.data) v = v * S(c);
    return push(std::move(n));
  }

  int sigmoid(int a) {
    Node n;
    n.op = Op::kSigmoid;
    n.a = a;
    n.value = val(a);
    using std::exp;
    for (S& v : n.value.data) v = S(1) / (S(1) + exp(-v));
    return push(std::move(n));
  }

  int tanh(int a) {
    Node n;
    n.op = Op::kTanh;
    n.a = a;
    n.value = val(a);
    using std::tanh;
    for (S& v : n.value.data) v = tanh(v);
    return push(std::move(n));
  }

  int softmax(int a) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 1) throw std::invalid_argument("softmax: expected vector");
    Node n;
    n.op = Op::kSoftmax;
    n.a = a;
    n.value = x;
    softmax_span(n.value.data.data(), x.dim(0));
    return push(std::move(n));
  }

  int softmax_rows(int a) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 2) throw std::invalid_argument("softmax_rows: expected matrix");
    Node n;
    n.op = Op::kSoftmaxRows;
    n.a = a;
    n.value = x;
    for (int r = 0; r < x.rows(); ++r) softmax_span(n.value.data.data() + static_cast<std::size_t>(r) * x.cols(), x.cols());
    return push(std::move(n));
  }

  int concat(int a, int b) {
    const Tensor<S>& x = val(a);
    const Tensor<S>& y = val(b);
    if (x.rank() != 1 || y.rank() != 1) throw std::invalid_argument("concat: expected vectors");
    Node n;
    n.op = Op::kConcat;
    n.a = a;
    n.b = b;
    Tensor<S> out({x.dim(0) + y.dim(0)});
    for (int i = 0; i < x.dim(0); ++i) out.at(i) = x.at(i);
    for (int i = 0; i < y.dim(0); ++i) out.at(x.dim(0) + i) = y.at(i);
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Vector slice [from, to).
  int slice(int a, int from, int to) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 1 || from < 0 || to > x.dim(0) || from >= to)
      throw std::invalid_argument("slice: bad range");
    Node n;
    n.op = Op::kSlice;
    n.a = a;
    n.aux0 = from;
    n.aux1 = to;
    Tensor<S> out({to - from});
    for (int i = from; i < to; ++i) out.at(i - from) = x.at(i);
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Select rows of a rank-2 table (embedding lookup).
  int gather_rows(int a, std::vector<int> rows) {
    const Tensor<S>& T = val(a);
    if (T.rank() != 2) throw std::invalid_argument("gather_rows: expected matrix");
    Node n;
    n.op = Op::kGatherRows;
    n.a = a;
    Tensor<S> out({static_cast<int>(rows.size()), T.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] < 0 || rows[r] >= T.rows()) throw std::invalid_argument("gather_rows: index out of range");
      for (int c = 0; c < T.cols(); ++c) out.at(static_cast<int>(r), c) = T.at(rows[r], c);
    }
    n.gather = std::move(rows);
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Row r of a rank-2 tensor, as a vector.
  int row(int a, int r) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 2 || r < 0 || r >= x.rows()) throw std::invalid_argument("row: bad index");
    Node n;
    n.op = Op::kRow;
    n.a = a;
    n.aux0 = r;
    Tensor<S> out({x.cols()});
    for (int c = 0; c < x.cols(); ++c) out.at(c) = x.at(r, c);
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Tile a vector into `rows` identical rows.
  int broadcast_rows(int a, int rows) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 1 || rows < 1) throw std::invalid_argument("broadcast_rows: expected vector");
    Node n;
    n.op = Op::kBroadcastRows;
    n.a = a;
    Tensor<S> out({rows, x.dim(0)});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < x.dim(0); ++c) out.at(r, c) = x.at(c);
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Normalize each row to zero mean and unit variance.
  int layer_norm_rows(int a) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 2) throw std::invalid_argument("layer_norm_rows: expected matrix");
    Node n;
    n.op = Op::kLayerNormRows;
    n.a = a;
    n.value = x;
    const int cols = x.cols();
    using std::sqrt;
    for (int r = 0; r < x.rows(); ++r) {
      S* y = n.value.data.data() + static_cast<std::size_t>(r) * cols;
      S mu(0);
      for (int c = 0; c < cols; ++c) mu += y[c];
      mu = mu * S(1.0 / cols);
      S var(0);
      for (int c = 0; c < cols; ++c) {
        y[c] = y[c] - mu;
        var += y[c] * y[c];
      }
      var = var * S(1.0 / cols);
      const S inv = S(1) / sqrt(var + S(kLayerNormEps));
      for (int c = 0; c < cols; ++c) y[c] = y[c] * inv;
    }
    return push(std::move(n));
  }

  int transpose(int a) {
    const Tensor<S>& x = val(a);
    if (x.rank() != 2) throw std::invalid_argument("transpose: expected matrix");
    Node n;
    n.op = Op::kTranspose;
    n.a = a;
    Tensor<S> out({x.cols(), x.rows()});
    for (int r = 0; r < x.rows(); ++r)
      for (int c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Negative log-likelihood of `target` under softmax(logits); scalar output.
  // Gradient w.r.t. logits is softmax(logits) - onehot(target).
  int cross_entropy(int logits, int target) {
    const Tensor<S>& z = val(logits);
    if (z.rank() != 1) throw std::invalid_argument("cross_entropy: expected logits vector");
    if (target < 0 || target >= z.dim(0)) throw std::invalid_argument("cross_entropy: bad target");
    Node n;
    n.op = Op::kCrossEntropy;
    n.a = logits;
    n.aux0 = target;
    using std::exp;
    using std::log;
    S mx = z.at(0);
    for (int i = 1; i < z.dim(0); ++i)
      if (z.at(i) > mx) mx = z.at(i);
    S sum(0);
    for (int i = 0; i < z.dim(0); ++i) sum += exp(z.at(i) - mx);
    n.value = Tensor<S>::scalar(mx + log(sum) - z.at(target));
    return push(std::move(n));
  }

  int sum(int a) {
    Node n;
    n.op = Op::kSum;
    n.a = a;
    S acc(0);
    for (const S& v : val(a).data) acc += v;
    n.value = Tensor<S>::scalar(acc);
    return push(std::move(n));
  }

  const Tensor<S>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse pass from a scalar output. Returns adjoints of the requested
  // leaves; requesting a non-input node is an error.
  std::vector<Tensor<S>> gradient(int output, const std::vector<int>& wrt) {
    if (val(output).numel() != 1) throw std::invalid_argument("gradient: output must be scalar");
    for (int id : wrt) {
      if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size() || nodes_[static_cast<std::size_t>(id)].op != Op::kInput)
        throw std::invalid_argument("gradient: wrt node is not an input leaf");
    }
    std::vector<Tensor<S>> adj(nodes_.size());
    std::vector<char> touched(nodes_.size(), 0);
    auto grad_of = [&](int id) -> Tensor<S>& {
      if (!touched[static_cast<std::size_t>(id)]) {
        adj[static_cast<std::size_t>(id)] = Tensor<S>(nodes_[static_cast<std::size_t>(id)].value.shape);
        touched[static_cast<std::size_t>(id)] = 1;
      }
      return adj[static_cast<std::size_t>(id)];
    };
    grad_of(output).data[0] = S(1);

    for (int id = output; id >= 0; --id) {
      if (!touched[static_cast<std::size_t>(id)]) continue;
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      const Tensor<S>& g = adj[static_cast<std::size_t>(id)];
      switch (n.op) {
        case Op::kInput:
        case Op::kConstant:
          break;
        case Op::kMatMul: {
          const Tensor<S>& A = val(n.a);
          const Tensor<S>& B = val(n.b);
          Tensor<S>& gA = grad_of(n.a);
          Tensor<S>& gB = grad_of(n.b);
          if (B.rank() == 1) {
            for (int r = 0; r < A.rows(); ++r)
              for (int c = 0; c < A.cols(); ++c) {
                gA.at(r, c) += g.at(r) * B.at(c);
                gB.at(c) += A.at(r, c) * g.at(r);
              }
          } else {
            for (int r = 0; r < A.rows(); ++r)
              for (int k = 0; k < B.cols(); ++k) {
                const S go = g.at(r, k);
                for (int c = 0; c < A.cols(); ++c) {
                  gA.at(r, c) += go * B.at(c, k);
                  gB.at(c, k) += A.at(r, c) * go;
                }
              }
          }
          break;
        }
        case Op::kAdd: {
          accumulate(grad_of(n.a), g, S(1));
          accumulate(grad_of(n.b), g, S(1));
          break;
        }
        case Op::kSub: {
          accumulate(grad_of(n.a), g, S(1));
          accumulate(grad_of(n.b), g, S(-1));
          break;
        }
        case Op::kMul: {
          const Tensor<S>& A = val(n.a);
          const Tensor<S>& B = val(n.b);
          Tensor<S>& gA = grad_of(n.a);
          Tensor<S>& gB = grad_of(n.b);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            gA.data[i] += g.data[i] * B.data[i];
            gB.data[i] += g.data[i] * A.data[i];
          }
          break;
        }
        case Op::kScale: {
          accumulate(grad_of(n.a), g, S(n.scale));
          break;
        }
        case Op::kSigmoid: {
          Tensor<S>& gA = grad_of(n.a);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const S y = n.value.data[i];
            gA.data[i] += g.data[i] * y * (S(1) - y);
          }
          break;
        }
        case Op::kTanh: {
          Tensor<S>& gA = grad_of(n.a);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const S y = n.value.data[i];
            gA.data[i] += g.data[i] * (S(1) - y * y);
          }
          break;
        }
        case Op::kSoftmax: {
          softmax_backward(grad_of(n.a).data.data(), g.data.data(), n.value.data.data(), n.value.dim(0));
          break;
        }
        case Op::kSoftmaxRows: {
          const int c = n.value.cols();
          for (int r = 0; r < n.value.rows(); ++r) {
            const std::size_t off = static_cast<std::size_t>(r) * c;
            softmax_backward(grad_of(n.a).data.data() + off, g.data.data() + off, n.value.data.data() + off, c);
          }
          break;
        }
        case Op::kConcat: {
          Tensor<S>& gA = grad_of(n.a);
          Tensor<S>& gB = grad_of(n.b);
          const int na = gA.dim(0);
          for (int i = 0; i < na; ++i) gA.at(i) += g.at(i);
          for (int i = 0; i < gB.dim(0); ++i) gB.at(i) += g.at(na + i);
          break;
        }
        case Op::kSlice: {
          Tensor<S>& gA = grad_of(n.a);
          for (int i = n.aux0; i < n.aux1; ++i) gA.at(i) += g.at(i - n.aux0);
          break;
        }
        case Op::kGatherRows: {
          Tensor<S>& gA = grad_of(n.a);
          const int c = gA.cols();
          for (std::size_t r = 0; r < n.gather.size(); ++r)
            for (int j = 0; j < c; ++j) gA.at(n.gather[r], j) += g.at(static_cast<int>(r), j);
          break;
        }
        case Op::kRow: {
          Tensor<S>& gA = grad_of(n.a);
          for (int c = 0; c < gA.cols(); ++c) gA.at(n.aux0, c) += g.at(c);
          break;
        }
        case Op::kBroadcastRows: {
          Tensor<S>& gA = grad_of(n.a);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) gA.at(c) += g.at(r, c);
          break;
        }
        case Op::kLayerNormRows: {
          // With y = (x - mu) * inv:  dx = inv * (g - mean(g) - y * mean(g*y))
          const Tensor<S>& x = val(n.a);
          Tensor<S>& gA = grad_of(n.a);
          const int cols = x.cols();
          using std::sqrt;
          for (int r = 0; r < x.rows(); ++r) {
            const S* xr = x.data.data() + static_cast<std::size_t>(r) * cols;
            const S* yr = n.value.data.data() + static_cast<std::size_t>(r) * cols;
            const S* gr = g.data.data() + static_cast<std::size_t>(r) * cols;
            S* out = gA.data.data() + static_cast<std::size_t>(r) * cols;
            S mu(0);
            for (int c = 0; c < cols; ++c) mu += xr[c];
            mu = mu * S(1.0 / cols);
            S var(0);
            for (int c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
            var = var * S(1.0 / cols);
            const S inv = S(1) / sqrt(var + S(kLayerNormEps));
            S gmean(0), gymean(0);
            for (int c = 0; c < cols; ++c) {
              gmean += gr[c];
              gymean += gr[c] * yr[c];
            }
            gmean = gmean * S(1.0 / cols);
            gymean = gymean * S(1.0 / cols);
            for (int c = 0; c < cols; ++c) out[c] += inv * (gr[c] - gmean - yr[c] * gymean);
          }
          break;
        }
        case Op::kTranspose: {
          Tensor<S>& gA = grad_of(n.a);
          for (int r = 0; r < gA.rows(); ++r)
            for (int c = 0; c < gA.cols(); ++c) gA.at(r, c) += g.at(c, r);
          break;
        }
        case Op::kCrossEntropy: {
          const Tensor<S>& z = val(n.a);
          Tensor<S>& gA = grad_of(n.a);
          using std::exp;
          S mx = z.at(0);
          for (int i = 1; i < z.dim(0); ++i)
            if (z.at(i) > mx) mx = z.at(i);
          S sum(0);
          for (int i = 0; i < z.dim(0); ++i) sum += exp(z.at(i) - mx);
          const S g0 = g.data[0];
          for (int i = 0; i < z.dim(0); ++i) {
            S p = exp(z.at(i) - mx) / sum;
            if (i == n.aux0) p = p - S(1);
            gA.at(i) += g0 * p;
          }
          break;
        }
        case Op::kSum: {
          Tensor<S>& gA = grad_of(n.a);
          const S g0 = g.data[0];
          for (S& v : gA.data) v += g0;
          break;
        }
      }
    }

    std::vector<Tensor<S>> out;
    out.reserve(wrt.size());
    for (int id : wrt) {
      if (touched[static_cast<std::size_t>(id)]) {
        out.push_back(std::move(adj[static_cast<std::size_t>(id)]));
      } else {
        out.push_back(Tensor<S>(nodes_[static_cast<std::size_t>(id)].value.shape));
      }
    }
    return out;
  }

 private:
  int binary(Op op, int a, int b) {
    const Tensor<S>& A = val(a);
    const Tensor<S>& B = val(b);
    if (!A.same_shape(B)) throw std::invalid_argument("elementwise op: shape mismatch");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.value = A;
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < B.data.size(); ++i) n.value.data[i] += B.data[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < B.data.size(); ++i) n.value.data[i] -= B.data[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < B.data.size(); ++i) n.value.data[i] *= B.data[i];
        break;
      default:
        throw std::logic_error("binary: bad op");
    }
    return push(std::move(n));
  }

  void softmax_span(S* x, int n) {
    using std::exp;
    S mx = x[0];
    for (int i = 1; i < n; ++i)
      if (x[i] > mx) mx = x[i];
    S sum(0);
    for (int i = 0; i < n; ++i) {
      x[i] = exp(x[i] - mx);
      sum += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] = x[i] / sum;
  }

  void softmax_backward(S* gin, const S* gout, const S* y, int n) {
    S dot(0);
    for (int i = 0; i < n; ++i) dot += gout[i] * y[i];
    for (int i = 0; i < n; ++i) gin[i] += y[i] * (gout[i] - dot);
  }

  static void accumulate(Tensor<S>& dst, const Tensor<S>& src, S factor) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += factor * src.data[i];
  }

  int push(Node n) {
    check_finite(n.value, "tape op");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Second-order helpers over arbitrary scalar-valued tape programs.

struct SecondOrder {
  double value = 0.0;
  Tensor<double> grad;  // df/dX
  Tensor<double> hv;    // (d2f/dX dX) @ vec(seed)
};

// fn receives a Tape<Dual> and the input node id, returns the scalar output
// node. One call yields f, its gradient and one exact Hessian-vector product.
template <class Fn>
SecondOrder hvp_of(Fn&& fn, const Tensor<double>& x, const Tensor<double>& seed) {
  if (!x.same_shape(seed)) throw std::invalid_argument("hvp_of: seed shape mismatch");
  Tape<Dual> tape;
  Tensor<Dual> xd(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) xd.data[i] = Dual(x.data[i], seed.data[i]);
  int xin = tape.input(std::move(xd));
  int out = fn(tape, xin);
  if (tape.val(out).numel() != 1) throw std::invalid_argument("hvp_of: output must be scalar");
  SecondOrder res;
  res.value = tape.val(out).at(0).v;
  auto grads = tape.gradient(out, {xin});
  res.grad = Tensor<double>(x.shape);
  res.hv = Tensor<double>(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    res.grad.data[i] = grads[0].data[i].v;
    res.hv.data[i] = grads[0].data[i].t;
  }
  return res;
}

// Exact d x d block H[i,j] of second derivatives between rows i and j of an
// [n, d] input, one tangent pass per column.
template <class Fn>
Tensor<double> cross_hessian_of(Fn&& fn, const Tensor<double>& E, int i, int j) {
  if (E.rank() != 2) throw std::invalid_argument("cross_hessian_of: expected matrix input");
  const int n = E.rows(), d = E.cols();
  if (i < 0 || i >= n || j < 0 || j >= n) throw std::invalid_argument("cross_hessian_of: position out of range");
  Tensor<double> block({d, d});
  for (int b = 0; b < d; ++b) {
    Tensor<double> seed(E.shape);
    seed.at(j, b) = 1.0;
    SecondOrder r = hvp_of(fn, E, seed);
    for (int a = 0; a < d; ++a) block.at(a, b) = r.hv.at(i, a);
  }
  return block;
}

}  // namespace fidam
