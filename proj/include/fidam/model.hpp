#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fidam/dual.hpp"
#include "fidam/graph.hpp"
#include "fidam/grammar.hpp"
#include "fidam/rng.hpp"
#include "fidam/tensor.hpp"

namespace fidam {

struct ModelConfig {
  std::string arch = "lstm";  // lstm | transformer
  int embedding_dim = 0;      // 0 = |vocab|
  int hidden_dim = 20;
  int layers = 1;
  int heads = 2;            // transformer only
  int max_positions = 32;   // transformer positional table size
  std::vector<std::string> vocab;

  int vocab_size() const { return static_cast<int>(vocab.size()); }
  int embed_dim() const { return embedding_dim > 0 ? embedding_dim : vocab_size(); }
};

struct TrainingRecord {
  std::uint64_t seed = 0;
  int epochs = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> loss_curve;
  bool converged = false;
};

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor<double>> params;
  TrainingRecord training;
  std::string corpus_file;  // optional; perfection is re-verified against it at load
  std::string grammar_file;
};

class NonConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OutputScalar { kLogitWellFormed, kProbWellFormed, kLogitDiff };

inline OutputScalar output_scalar_from_name(const std::string& s) {
  if (s == "logit_wellformed") return OutputScalar::kLogitWellFormed;
  if (s == "prob_wellformed") return OutputScalar::kProbWellFormed;
  if (s == "logit_diff") return OutputScalar::kLogitDiff;
  throw std::invalid_argument("unknown output scalar '" + s + "'");
}

inline double select_output(const std::array<double, 2>& logits, OutputScalar mode) {
  switch (mode) {
    case OutputScalar::kLogitWellFormed:
      return logits[1];
    case OutputScalar::kProbWellFormed: {
      const double m = logits[0] > logits[1] ? logits[0] : logits[1];
      const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
      return e1 / (e0 + e1);
    }
    case OutputScalar::kLogitDiff:
      return logits[1] - logits[0];
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Parameter initialisation

inline std::map<std::string, Tensor<double>> init_params(const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.embed_dim();
  const int h = cfg.hidden_dim;
  const double k = 1.0 / std::sqrt(static_cast<double>(h));
  std::map<std::string, Tensor<double>> p;
  auto uniform = [&](std::vector<int> shape) {
    Tensor<double> t(std::move(shape));
    for (double& v : t.data) v = rng.next_uniform(-k, k);
    return t;
  };
  p["embedding"] = uniform({cfg.vocab_size(), d});
  if (cfg.arch == "lstm") {
    p["lstm.w_x"] = uniform({4 * h, d});
    p["lstm.w_h"] = uniform({4 * h, h});
    p["lstm.b"] = uniform({4 * h});
    for (int i = h; i < 2 * h; ++i) p["lstm.b"].at(i) += 1.0;  // forget gate bias
  } else if (cfg.arch == "transformer") {
    if (h % cfg.heads != 0) throw std::invalid_argument("hidden_dim must be divisible by heads");
    const int dh = h / cfg.heads;
    p["tf.w_in"] = uniform({d, h});
    p["tf.pos"] = uniform({cfg.max_positions, h});
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const std::string tag = "tf.h" + std::to_string(hd);
      p[tag + ".w_q"] = uniform({h, dh});
      p[tag + ".w_k"] = uniform({h, dh});
      p[tag + ".w_v"] = uniform({h, dh});
      p[tag + ".w_o"] = uniform({dh, h});
    }
    p["tf.ffn.w1"] = uniform({h, 2 * h});
    p["tf.ffn.w2"] = uniform({2 * h, h});
    for (const char* ln : {"tf.ln1", "tf.ln2"}) {
      Tensor<double> gain({h}), bias({h});
      for (double& v : gain.data) v = 1.0;
      p[std::string(ln) + ".g"] = gain;
      p[std::string(ln) + ".b"] = bias;
    }
  } else {
    throw std::invalid_argument("unknown arch '" + cfg.arch + "'");
  }
  p["head.w"] = uniform({2, h});
  p["head.b"] = uniform({2});
  return p;
}

// ---------------------------------------------------------------------------
// Taped forward pass (shared by training and second-order attribution)

template <class S>
std::map<std::string, int> inject_params(Tape<S>& tape, const std::map<std::string, Tensor<double>>& params,
                                         bool differentiable) {
  std::map<std::string, int> nodes;
  for (const auto& [name, t] : params) {
    Tensor<S> v(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) v.data[i] = S(t.data[i]);
    nodes[name] = differentiable ? tape.input(std::move(v)) : tape.constant(std::move(v));
  }
  return nodes;
}

// Logits node from an [n, d] embedding node. The classifier head reads the
// final hidden state (LSTM) / final-position encoding (Transformer).
template <class S>
int taped_logits(Tape<S>& tape, const ModelConfig& cfg, const std::map<std::string, int>& pn, int emb_node) {
  const int n = tape.val(emb_node).rows();
  const int h = cfg.hidden_dim;
  int feature = -1;
  if (cfg.arch == "lstm") {
    int hprev = tape.constant(Tensor<S>({h}));
    int cprev = tape.constant(Tensor<S>({h}));
    for (int t = 0; t < n; ++t) {
      int e = tape.row(emb_node, t);
      int z = tape.add(tape.add(tape.matmul(pn.at("lstm.w_x"), e), tape.matmul(pn.at("lstm.w_h"), hprev)), pn.at("lstm.b"));
      int ig = tape.sigmoid(tape.slice(z, 0, h));
      int fg = tape.sigmoid(tape.slice(z, h, 2 * h));
      int gg = tape.tanh(tape.slice(z, 2 * h, 3 * h));
      int og = tape.sigmoid(tape.slice(z, 3 * h, 4 * h));
      cprev = tape.add(tape.mul(fg, cprev), tape.mul(ig, gg));
      hprev = tape.mul(og, tape.tanh(cprev));
    }
    feature = hprev;
  } else if (cfg.arch == "transformer") {
    if (n > cfg.max_positions) throw std::invalid_argument("sequence longer than positional table");
    std::vector<int> pos_idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pos_idx[static_cast<std::size_t>(i)] = i;
    int x = tape.add(tape.matmul(emb_node, pn.at("tf.w_in")), tape.gather_rows(pn.at("tf.pos"), pos_idx));
    auto layer_norm = [&](int v, const std::string& tag) {
      int normed = tape.layer_norm_rows(v);
      int scaled = tape.mul(normed, tape.broadcast_rows(pn.at(tag + ".g"), n));
      return tape.add(scaled, tape.broadcast_rows(pn.at(tag + ".b"), n));
    };
    const int dh = h / cfg.heads;
    int xn = layer_norm(x, "tf.ln1");
    int attn = -1;
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const std::string tag = "tf.h" + std::to_string(hd);
      int q = tape.matmul(xn, pn.at(tag + ".w_q"));
      int kk = tape.matmul(xn, pn.at(tag + ".w_k"));
      int v = tape.matmul(xn, pn.at(tag + ".w_v"));
      int scores = tape.scale(tape.matmul(q, tape.transpose(kk)), 1.0 / std::sqrt(static_cast<double>(dh)));
      int ctx = tape.matmul(tape.softmax_rows(scores), v);
      int proj = tape.matmul(ctx, pn.at(tag + ".w_o"));
      attn = attn < 0 ? proj : tape.add(attn, proj);
    }
    int x1 = tape.add(x, attn);
    int ffn = tape.matmul(tape.tanh(tape.matmul(layer_norm(x1, "tf.ln2"), pn.at("tf.ffn.w1"))), pn.at("tf.ffn.w2"));
    int x2 = tape.add(x1, ffn);
    feature = tape.row(x2, n - 1);
  } else {
    throw std::invalid_argument("unknown arch '" + cfg.arch + "'");
  }
  return tape.add(tape.matmul(pn.at("head.w"), feature), pn.at("head.b"));
}

template <class S>
int taped_output_scalar(Tape<S>& tape, int logits, OutputScalar mode) {
  switch (mode) {
    case OutputScalar::kLogitWellFormed:
      return tape.slice(logits, 1, 2);
    case OutputScalar::kProbWellFormed:
      return tape.slice(tape.softmax(logits), 1, 2);
    case OutputScalar::kLogitDiff:
      return tape.sub(tape.slice(logits, 1, 2), tape.slice(logits, 0, 1));
  }
  throw std::logic_error("bad output mode");
}

// ---------------------------------------------------------------------------
// Fast primal forward (no tape). Used by value functions and accuracy; holds
// scratch buffers, so give each worker its own instance.

class PrimalModel {
 public:
  explicit PrimalModel(const Checkpoint& ckpt) : cfg_(&ckpt.config), params_(&ckpt.params) {
    if (cfg_->arch != "lstm" && cfg_->arch != "transformer")
      throw std::invalid_argument("unknown arch '" + cfg_->arch + "'");
  }

  const ModelConfig& config() const { return *cfg_; }

  Tensor<double> lookup(const TokenSeq& tokens) const {
    const Tensor<double>& emb = params_->at("embedding");
    Tensor<double> E({static_cast<int>(tokens.size()), emb.cols()});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] >= emb.rows()) throw std::invalid_argument("token out of vocabulary");
      for (int c = 0; c < emb.cols(); ++c) E.at(static_cast<int>(i), c) = emb.at(tokens[i], c);
    }
    return E;
  }

  std::array<double, 2> logits(const TokenSeq& tokens) { return logits_from_embeddings(lookup(tokens)); }

  std::array<double, 2> logits_from_embeddings(const Tensor<double>& E) {
    if (E.rank() != 2 || E.cols() != cfg_->embed_dim()) throw std::invalid_argument("embedding matrix has wrong width");
    if (cfg_->arch == "lstm") return lstm_logits(E);
    return transformer_logits(E);
  }

  int predict(const TokenSeq& tokens) {
    const auto z = logits(tokens);
    return z[1] > z[0] ? 1 : 0;
  }

 private:
  std::array<double, 2> lstm_logits(const Tensor<double>& E) {
    const int n = E.rows();
    const int h = cfg_->hidden_dim;
    const Tensor<double>& wx = params_->at("lstm.w_x");
    const Tensor<double>& wh = params_->at("lstm.w_h");
    const Tensor<double>& b = params_->at("lstm.b");
    hbuf_.assign(static_cast<std::size_t>(h), 0.0);
    cbuf_.assign(static_cast<std::size_t>(h), 0.0);
    zbuf_.resize(static_cast<std::size_t>(4 * h));
    const int d = E.cols();
    for (int t = 0; t < n; ++t) {
      const double* e = E.data.data() + static_cast<std::size_t>(t) * d;
      for (int r = 0; r < 4 * h; ++r) {
        double acc = 0.0;
        const double* wxr = wx.data.data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) acc += wxr[c] * e[c];
        double acc2 = 0.0;
        const double* whr = wh.data.data() + static_cast<std::size_t>(r) * h;
        for (int c = 0; c < h; ++c) acc2 += whr[c] * hbuf_[static_cast<std::size_t>(c)];
        zbuf_[static_cast<std::size_t>(r)] = acc + acc2 + b.at(r);
      }
      for (int j = 0; j < h; ++j) {
        const double ig = sigmoid(zbuf_[static_cast<std::size_t>(j)]);
        const double fg = sigmoid(zbuf_[static_cast<std::size_t>(h + j)]);
        const double gg = std::tanh(zbuf_[static_cast<std::size_t>(2 * h + j)]);
        const double og = sigmoid(zbuf_[static_cast<std::size_t>(3 * h + j)]);
        cbuf_[static_cast<std::size_t>(j)] = fg * cbuf_[static_cast<std::size_t>(j)] + ig * gg;
        hbuf_[static_cast<std::size_t>(j)] = og * std::tanh(cbuf_[static_cast<std::size_t>(j)]);
      }
    }
    return head(hbuf_);
  }

  std::array<double, 2> transformer_logits(const Tensor<double>& E) {
    // The transformer path is exercised far less than the LSTM; reuse the
    // taped implementation rather than duplicating the attention arithmetic.
    Tape<double> tape;
    auto pn = inject_params(tape, *params_, false);
    int e = tape.constant(E);
    int lg = taped_logits(tape, *cfg_, pn, e);
    return {tape.val(lg).at(0), tape.val(lg).at(1)};
  }

  std::array<double, 2> head(const std::vector<double>& feat) const {
    const Tensor<double>& w = params_->at("head.w");
    const Tensor<double>& b = params_->at("head.b");
    std::array<double, 2> out{};
    for (int r = 0; r < 2; ++r) {
      double acc = 0.0;
      for (int c = 0; c < static_cast<int>(feat.size()); ++c) acc += w.at(r, c) * feat[static_cast<std::size_t>(c)];
      out[static_cast<std::size_t>(r)] = acc + b.at(r);
    }
    return out;
  }

  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  const ModelConfig* cfg_;
  const std::map<std::string, Tensor<double>>* params_;
  std::vector<double> hbuf_, cbuf_, zbuf_;
};

// ---------------------------------------------------------------------------
// Accuracy and perfection checks

inline double accuracy(const Checkpoint& ckpt, const std::vector<const CorpusItem*>& items) {
  if (items.empty()) throw std::invalid_argument("accuracy: empty item set");
  PrimalModel model(ckpt);
  int correct = 0;
  for (const CorpusItem* item : items)
    if (model.predict(item->tokens) == (item->well_formed ? 1 : 0)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

inline std::vector<const CorpusItem*> split_items(const Corpus& c, const std::vector<int>& idx) {
  std::vector<const CorpusItem*> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(&c.item(i));
  return out;
}

// ---------------------------------------------------------------------------
// Training (AdamW, cross-entropy, early stop at joint perfection)

struct TrainOptions {
  double lr = 0.01;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 48;
  int max_epochs = 500;
  int retries = 5;
  std::uint64_t seed = 7;
  bool verbose = false;
};

namespace detail {

inline TrainingRecord train_once(Checkpoint& ckpt, const Corpus& corpus, const TrainOptions& opt, std::uint64_t seed) {
  Rng init_rng = Rng(seed).split(0x696e6974);
  ckpt.params = init_params(ckpt.config, init_rng);
  TrainingRecord rec;
  rec.seed = seed;

  std::map<std::string, Tensor<double>> m1, m2;
  for (const auto& [name, t] : ckpt.params) {
    m1[name] = Tensor<double>(t.shape);
    m2[name] = Tensor<double>(t.shape);
  }

  std::vector<int> order = corpus.train_idx;
  Rng shuffle_rng = Rng(seed).split(0x73687566);
  long step = 0;

  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;

    // One tape per batch: items share the parameter nodes, losses are summed
    // and a single reverse pass yields the mean-batch gradient.
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      Tape<double> tape;
      auto pn = inject_params(tape, ckpt.params, true);
      int total = -1;
      for (std::size_t k = start; k < end; ++k) {
        const CorpusItem& item = corpus.item(order[k]);
        int emb = tape.gather_rows(pn.at("embedding"), item.tokens);
        int logits = taped_logits(tape, ckpt.config, pn, emb);
        int loss = tape.cross_entropy(logits, item.well_formed ? 1 : 0);
        total = total < 0 ? loss : tape.add(total, loss);
      }
      loss_sum += tape.val(total).at(0);
      int mean_loss = tape.scale(total, 1.0 / static_cast<double>(end - start));
      std::vector<int> wrt;
      std::vector<const std::string*> names;
      for (const auto& [name, node] : pn) {
        wrt.push_back(node);
        names.push_back(&name);
      }
      std::vector<Tensor<double>> grads = tape.gradient(mean_loss, wrt);

      ++step;
      const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < names.size(); ++p) {
        Tensor<double>& theta = ckpt.params.at(*names[p]);
        Tensor<double>& m = m1.at(*names[p]);
        Tensor<double>& v = m2.at(*names[p]);
        const Tensor<double>& g = grads[p];
        for (std::size_t i = 0; i < theta.data.size(); ++i) {
          m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * g.data[i];
          v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * g.data[i] * g.data[i];
          const double mhat = m.data[i] / bc1;
          const double vhat = v.data[i] / bc2;
          theta.data[i] -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * theta.data[i]);
        }
      }
    }

    rec.loss_curve.push_back(order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size()));
    rec.epochs = epoch + 1;
    rec.train_accuracy = accuracy(ckpt, split_items(corpus, corpus.train_idx));
    if (rec.train_accuracy == 1.0 || epoch + 1 == opt.max_epochs)
      rec.test_accuracy = accuracy(ckpt, split_items(corpus, corpus.test_idx));
    if (opt.verbose) {
      std::fprintf(stderr, "epoch %d loss %.5f train %.4f test %.4f\n", epoch + 1, rec.loss_curve.back(),
                   rec.train_accuracy, rec.test_accuracy);
    }
    if (rec.train_accuracy == 1.0 && rec.test_accuracy == 1.0) {
      rec.converged = true;
      break;
    }
  }
  return rec;
}

}  // namespace detail

// Trains until both splits are classified perfectly, retrying with fresh
// seeds. Downstream faithfulness claims rest on perfection, so failure after
// all retries is a hard error.
inline Checkpoint train(const ModelConfig& cfg, const Corpus& corpus, const TrainOptions& opt = {}) {
  if (corpus.train_idx.empty() || corpus.test_idx.empty())
    throw std::invalid_argument("train: corpus has no train/test split");
  Checkpoint ckpt;
  ckpt.config = cfg;
  if (ckpt.config.embedding_dim == 0) ckpt.config.embedding_dim = ckpt.config.vocab_size();
  for (int attempt = 0; attempt <= opt.retries; ++attempt) {
    const std::uint64_t seed = Rng(opt.seed).split(static_cast<std::uint64_t>(attempt)).next_u64();
    ckpt.training = detail::train_once(ckpt, corpus, opt, seed);
    if (ckpt.training.converged) return ckpt;
  }
  throw NonConvergenceError("training failed to reach 100% train/test accuracy after " +
                            std::to_string(opt.retries + 1) + " attempts");
}

// Scalar tape program of the embedding matrix, for the second-order helpers.
inline auto model_scalar_fn(const Checkpoint& ckpt, OutputScalar mode) {
  return [&ckpt, mode](Tape<Dual>& tape, int emb) {
    auto pn = inject_params(tape, ckpt.params, false);
    int logits = taped_logits(tape, ckpt.config, pn, emb);
    return taped_output_scalar(tape, logits, mode);
  };
}

// ---------------------------------------------------------------------------
// Hessian-vector products of the model output w.r.t. input embeddings

inline SecondOrder model_hvp(const Checkpoint& ckpt, const Tensor<double>& E, const Tensor<double>& seed,
                             OutputScalar mode) {
  return hvp_of(model_scalar_fn(ckpt, mode), E, seed);
}

// Exact d x d block of second derivatives between token positions i and j.
inline Tensor<double> cross_hessian(const Checkpoint& ckpt, const Tensor<double>& E, int i, int j, OutputScalar mode) {
  return cross_hessian_of(model_scalar_fn(ckpt, mode), E, i, j);
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: a small versioned container with a JSON header,
// raw little-endian float64 blobs and a trailing FNV-1a checksum.

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"arch", c.arch},         {"embedding_dim", c.embedding_dim}, {"hidden_dim", c.hidden_dim},
          {"layers", c.layers},     {"heads", c.heads},                 {"max_positions", c.max_positions},
          {"vocab", c.vocab}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = j.at("arch").get<std::string>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.vocab = j.at("vocab").get<std::vector<std::string>>();
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["version"] = 1;
  header["config"] = config_to_json(ckpt.config);
  header["training"] = {{"seed", ckpt.training.seed},
                        {"epochs", ckpt.training.epochs},
                        {"train_accuracy", ckpt.training.train_accuracy},
                        {"test_accuracy", ckpt.training.test_accuracy},
                        {"converged", ckpt.training.converged},
                        {"loss_curve", ckpt.training.loss_curve}};
  header["corpus_file"] = ckpt.corpus_file;
  header["grammar_file"] = ckpt.grammar_file;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.params) manifest.push_back({{"name", name}, {"shape", t.shape}});
  header["params"] = manifest;

  std::string buf = "FIDAM-CKPT-1\n" + header.dump() + "\n";
  for (const auto& [name, t] : ckpt.params) {
    const std::size_t bytes = t.data.size() * sizeof(double);
    const std::size_t off = buf.size();
    buf.resize(off + bytes);
    std::memcpy(buf.data() + off, t.data.data(), bytes);
  }
  const std::uint64_t checksum = fnv1a(buf.data(), buf.size());
  char tail[8];
  std::memcpy(tail, &checksum, 8);
  buf.append(tail, 8);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Checkpoint load_checkpoint(const std::string& path, bool verify_perfection = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 13) throw IntegrityError("checkpoint file too short: " + path);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (fnv1a(buf.data(), buf.size() - 8) != stored)
    throw IntegrityError("checkpoint checksum mismatch: " + path);

  std::size_t p = buf.find('\n');
  if (buf.substr(0, p) != "FIDAM-CKPT-1") throw IntegrityError("unknown checkpoint format: " + path);
  std::size_t hend = buf.find('\n', p + 1);
  nlohmann::json header = nlohmann::json::parse(buf.substr(p + 1, hend - p - 1));

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  const auto& tr = header.at("training");
  ckpt.training.seed = tr.at("seed").get<std::uint64_t>();
  ckpt.training.epochs = tr.at("epochs").get<int>();
  ckpt.training.train_accuracy = tr.at("train_accuracy").get<double>();
  ckpt.training.test_accuracy = tr.at("test_accuracy").get<double>();
  ckpt.training.converged = tr.at("converged").get<bool>();
  ckpt.training.loss_curve = tr.at("loss_curve").get<std::vector<double>>();
  ckpt.corpus_file = header.at("corpus_file").get<std::string>();
  ckpt.grammar_file = header.at("grammar_file").get<std::string>();

  std::size_t off = hend + 1;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    Tensor<double> t(entry.at("shape").get<std::vector<int>>());
    const std::size_t bytes = t.data.size() * sizeof(double);
    if (off + bytes > buf.size() - 8) throw IntegrityError("checkpoint truncated: " + path);
    std::memcpy(t.data.data(), buf.data() + off, bytes);
    off += bytes;
    ckpt.params.emplace(name, std::move(t));
  }

  if (verify_perfection && ckpt.training.converged && !ckpt.corpus_file.empty() && !ckpt.grammar_file.empty()) {
    std::ifstream probe(ckpt.corpus_file);
    std::ifstream probe2(ckpt.grammar_file);
    if (probe && probe2) {
      Grammar g = read_grammar(ckpt.grammar_file);
      Corpus c = read_corpus(ckpt.corpus_file, g);
      std::vector<const CorpusItem*> all;
      for (const CorpusItem& it : c.positive) all.push_back(&it);
      for (const CorpusItem& it : c.negative) all.push_back(&it);
      if (accuracy(ckpt, all) != 1.0)
        throw IntegrityError("checkpoint flagged converged but misclassifies its corpus: " + path);
    }
  }
  return ckpt;
}

}  // namespace fidam
