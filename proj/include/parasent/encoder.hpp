#pragma once

// Trainable sentence encoder: word-level tokenizer, token embedding table,
// optional post-norm self-attention blocks and a pooling head (CLS, mean,
// max, or the last hidden state of a unidirectional LSTM run over the token
// vectors). Forward passes record a SentenceTrace from which the analytic
// backward pass is computed.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "parasent/numeric.hpp"

namespace parasent {

enum class Pooling { cls, mean, max, lstm };

inline std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::cls: return "cls";
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::lstm: return "lstm";
  }
  throw std::invalid_argument("unknown pooling strategy");
}

inline Pooling parse_pooling(std::string_view name) {
  if (name == "cls") return Pooling::cls;
  if (name == "mean") return Pooling::mean;
  if (name == "max") return Pooling::max;
  if (name == "lstm") return Pooling::lstm;
  throw std::invalid_argument("unknown pooling strategy '" + std::string(name) + "'");
}

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t num_blocks = 1;
  std::size_t ffn_dim = 128;
  Pooling pooling = Pooling::lstm;
  std::size_t lstm_hidden = 128;
  std::size_t max_len = 64;

  std::size_t output_dim() const { return pooling == Pooling::lstm ? lstm_hidden : embed_dim; }

  void validate() const {
    if (embed_dim == 0) throw std::invalid_argument("encoder: embed_dim must be positive");
    if (ffn_dim == 0) throw std::invalid_argument("encoder: ffn_dim must be positive");
    if (lstm_hidden == 0) throw std::invalid_argument("encoder: lstm_hidden must be positive");
    if (max_len < 2) throw std::invalid_argument("encoder: max_len must be >= 2");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercased (ASCII) words; every ASCII punctuation character is a token of
/// its own.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  static constexpr std::int32_t pad_id = 0;
  static constexpr std::int32_t unk_id = 1;
  static constexpr std::int32_t cls_id = 2;
  static constexpr std::string_view pad_token = "[PAD]";
  static constexpr std::string_view unk_token = "[UNK]";
  static constexpr std::string_view cls_token = "[CLS]";

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Tokens in id order; the three special tokens are prepended when absent.
  explicit Vocabulary(std::vector<std::string> tokens) {
    const bool has_specials = tokens.size() >= 3 && tokens[0] == pad_token && tokens[1] == unk_token &&
                              tokens[2] == cls_token;
    if (!has_specials) {
      tokens.insert(tokens.begin(),
                    {std::string(pad_token), std::string(unk_token), std::string(cls_token)});
    }
    tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
        throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
      }
    }
  }

  /// Tokens with frequency >= min_count, ordered by frequency (descending)
  /// then lexicographically.
  static Vocabulary build(const std::vector<std::string>& sentences, std::size_t min_count) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences)
      for (auto& w : split_words(s)) ++counts[std::move(w)];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [w, c] : counts)
      if (c >= min_count && w != pad_token && w != unk_token && w != cls_token) kept.emplace_back(w, c);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [w, c] : kept) tokens.push_back(std::move(w));
    return Vocabulary(std::move(tokens));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t id(std::string_view token) const {
    const auto it = ids_.find(std::string(token));
    return it == ids_.end() ? unk_id : it->second;
  }
  bool contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

inline Vocabulary build_vocabulary(const std::vector<std::string>& sentences, std::size_t min_count) {
  return Vocabulary::build(sentences, min_count);
}

/// [CLS] followed by word ids (UNK for unknown words), truncated to max_len.
inline std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::int32_t> ids{Vocabulary::cls_id};
  for (const auto& w : split_words(text)) {
    if (ids.size() >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Parameters

struct BlockParams {
  Matrix wq, wk, wv, wo;  // d x d
  Matrix w1, b1;          // d x f, 1 x f
  Matrix w2, b2;          // f x d, 1 x d
  Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // 1 x d

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "wq", self.wq);
    fn(prefix + "wk", self.wk);
    fn(prefix + "wv", self.wv);
    fn(prefix + "wo", self.wo);
    fn(prefix + "w1", self.w1);
    fn(prefix + "b1", self.b1);
    fn(prefix + "w2", self.w2);
    fn(prefix + "b2", self.b2);
    fn(prefix + "ln1_gain", self.ln1_gain);
    fn(prefix + "ln1_bias", self.ln1_bias);
    fn(prefix + "ln2_gain", self.ln2_gain);
    fn(prefix + "ln2_bias", self.ln2_bias);
  }
};

/// Gate weights act on [y_t; h_{t-1}] and are lstm_hidden x (d + lstm_hidden).
struct LstmParams {
  Matrix w_i, w_f, w_o, w_g;
  Matrix b_i, b_f, b_o, b_g;  // lstm_hidden x 1

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "w_i", self.w_i);
    fn(prefix + "w_f", self.w_f);
    fn(prefix + "w_o", self.w_o);
    fn(prefix + "w_g", self.w_g);
    fn(prefix + "b_i", self.b_i);
    fn(prefix + "b_f", self.b_f);
    fn(prefix + "b_o", self.b_o);
    fn(prefix + "b_g", self.b_g);
  }
};

/// Every trainable tensor. Also used as the gradient container; a gradient
/// buffer may leave `embedding` empty when token gradients are kept
/// separately.
struct Parameters {
  Matrix embedding;  // |V| x d
  std::vector<BlockParams> blocks;
  LstmParams lstm;

  /// fn(name, tensor) over all tensors in a fixed order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  Parameters zeros_like(bool with_embedding = true) const {
    Parameters z = *this;
    z.for_each([](const std::string&, Matrix& m) { m.fill(0.0); });
    if (!with_embedding) z.embedding = Matrix();
    return z;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  /// this += other, tensor by tensor; empty tensors on either side are skipped.
  void accumulate(const Parameters& other) {
    std::vector<const Matrix*> src;
    other.for_each([&](const std::string&, const Matrix& m) { src.push_back(&m); });
    std::size_t k = 0;
    for_each([&](const std::string& name, Matrix& m) {
      const Matrix& s = *src[k++];
      if (m.empty() || s.empty()) return;
      if (!m.same_shape(s)) throw std::invalid_argument("Parameters::accumulate: shape mismatch in " + name);
      add_inplace(m.values(), s.values());
    });
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    std::vector<const Matrix*> lhs;
    std::vector<const Matrix*> rhs;
    a.for_each([&](const std::string&, const Matrix& m) { lhs.push_back(&m); });
    b.for_each([&](const std::string&, const Matrix& m) { rhs.push_back(&m); });
    if (lhs.size() != rhs.size()) return false;
    for (std::size_t i = 0; i < lhs.size(); ++i)
      if (!(*lhs[i] == *rhs[i])) return false;
    return true;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("embedding"), self.embedding);
    for (std::size_t b = 0; b < self.blocks.size(); ++b)
      BlockParams::visit(self.blocks[b], "block" + std::to_string(b) + ".", fn);
    LstmParams::visit(self.lstm, "lstm.", fn);
  }
};

struct EncoderModel {
  EncoderConfig config;
  Vocabulary vocab;
  Parameters params;

  std::size_t output_dim() const { return config.output_dim(); }
};

namespace detail {
inline void xavier_fill(Matrix& m, std::size_t fan_in, std::size_t fan_out, SeededRng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : m.values()) x = rng.uniform(-a, a);
}
}  // namespace detail

/// Xavier-uniform weights, zero biases, unit layer-norm gains, LSTM forget
/// bias 1. Draws happen in Parameters::for_each order.
inline EncoderModel init_model(const EncoderConfig& config, Vocabulary vocab, SeededRng rng) {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t f = config.ffn_dim;
  const std::size_t h = config.lstm_hidden;
  EncoderModel model{config, std::move(vocab), {}};
  auto& p = model.params;
  p.embedding = Matrix(model.vocab.size(), d);
  detail::xavier_fill(p.embedding, model.vocab.size(), d, rng);
  p.blocks.resize(config.num_blocks);
  for (auto& b : p.blocks) {
    for (Matrix* w : {&b.wq, &b.wk, &b.wv, &b.wo}) {
      *w = Matrix(d, d);
      detail::xavier_fill(*w, d, d, rng);
    }
    b.w1 = Matrix(d, f);
    detail::xavier_fill(b.w1, d, f, rng);
    b.b1 = Matrix(1, f);
    b.w2 = Matrix(f, d);
    detail::xavier_fill(b.w2, f, d, rng);
    b.b2 = Matrix(1, d);
    b.ln1_gain = Matrix(1, d, 1.0);
    b.ln1_bias = Matrix(1, d);
    b.ln2_gain = Matrix(1, d, 1.0);
    b.ln2_bias = Matrix(1, d);
  }
  auto& l = p.lstm;
  for (Matrix* w : {&l.w_i, &l.w_f, &l.w_o, &l.w_g}) {
    *w = Matrix(h, d + h);
    detail::xavier_fill(*w, d + h, h, rng);
  }
  l.b_i = Matrix(h, 1);
  l.b_f = Matrix(h, 1, 1.0);
  l.b_o = Matrix(h, 1);
  l.b_g = Matrix(h, 1);
  return model;
}

// ---------------------------------------------------------------------------
// Layers

/// Row lookup into the embedding table.
inline Matrix embed_tokens(const std::vector<std::int32_t>& ids, const Matrix& table) {
  Matrix x(ids.size(), table.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= table.rows()) {
      throw std::out_of_range("embed_tokens: id " + std::to_string(ids[t]) + " outside vocabulary of " +
                              std::to_string(table.rows()));
    }
    const auto src = table.row(static_cast<std::size_t>(ids[t]));
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  Vector rstd;
};

/// Per-row normalization to mean 0 / variance 1 (population variance), then
/// gain and bias.
inline Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Matrix y(n, d);
  Matrix xhat(n, d);
  Vector rstd(n);
  for (std::size_t t = 0; t < n; ++t) {
    double mean = 0.0;
    for (double v : x.row(t)) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x.row(t)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    rstd[t] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(t, j) = (x(t, j) - mean) * rstd[t];
      y(t, j) = gain(0, j) * xhat(t, j) + bias(0, j);
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& c, const Matrix& gain, Matrix& dgain,
                                  Matrix& dbias) {
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  Matrix dx(n, d);
  Vector dxhat(d);
  for (std::size_t t = 0; t < n; ++t) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain(0, j) += dy(t, j) * c.xhat(t, j);
      dbias(0, j) += dy(t, j);
      dxhat[j] = dy(t, j) * gain(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * c.xhat(t, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(t, j) = c.rstd[t] * (dxhat[j] - mean_dxhat - c.xhat(t, j) * mean_dxhat_xhat);
  }
  return dx;
}

struct BlockCache {
  Matrix x, q, k, v, attn, ctx, z1, u, act;
  LayerNormCache ln1, ln2;
};

/// Single-head self-attention with residual + layer norm, then a ReLU
/// feed-forward layer with residual + layer norm.
inline Matrix attention_block_forward(const Matrix& x, const BlockParams& p, BlockCache* cache = nullptr) {
  if (x.rows() == 0) throw std::invalid_argument("attention_block_forward: empty sequence");
  const std::size_t n = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Matrix q = matmul(x, p.wq);
  Matrix k = matmul(x, p.wk);
  Matrix v = matmul(x, p.wv);
  Matrix attn = matmul_bt(q, k);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = attn.row(i);
    for (auto& s : row) s *= scale;
    const double lse = logsumexp(row);
    for (auto& s : row) s = std::exp(s - lse);
  }
  Matrix ctx = matmul(attn, v);
  Matrix r1 = matmul(ctx, p.wo);
  add_inplace(r1.values(), x.values());
  LayerNormCache ln1;
  Matrix z1 = layer_norm_forward(r1, p.ln1_gain, p.ln1_bias, &ln1);
  Matrix u = matmul(z1, p.w1);
  for (std::size_t t = 0; t < n; ++t) add_inplace(u.row(t), p.b1.row(0));
  Matrix act = u;
  for (auto& a : act.values()) a = a > 0.0 ? a : 0.0;
  Matrix r2 = matmul(act, p.w2);
  for (std::size_t t = 0; t < n; ++t) add_inplace(r2.row(t), p.b2.row(0));
  add_inplace(r2.values(), z1.values());
  LayerNormCache ln2;
  Matrix y = layer_norm_forward(r2, p.ln2_gain, p.ln2_bias, &ln2);
  if (cache) {
    *cache = {x, std::move(q), std::move(k), std::move(v), std::move(attn), std::move(ctx),
              std::move(z1), std::move(u), std::move(act), std::move(ln1), std::move(ln2)};
  }
  return y;
}

/// Accumulates parameter gradients into `g`; returns dL/dx.
inline Matrix attention_block_backward(const Matrix& dy, const BlockParams& p, const BlockCache& c, BlockParams& g) {
  const std::size_t n = dy.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.x.cols()));

  Matrix dr2 = layer_norm_backward(dy, c.ln2, p.ln2_gain, g.ln2_gain, g.ln2_bias);
  matmul_at_acc(c.act, dr2, g.w2);
  for (std::size_t t = 0; t < n; ++t) add_inplace(g.b2.row(0), dr2.row(t));
  Matrix du = matmul_bt(dr2, p.w2);
  for (std::size_t i = 0; i < du.size(); ++i)
    if (!(c.u.values()[i] > 0.0)) du.values()[i] = 0.0;
  matmul_at_acc(c.z1, du, g.w1);
  for (std::size_t t = 0; t < n; ++t) add_inplace(g.b1.row(0), du.row(t));
  Matrix dz1 = matmul_bt(du, p.w1);
  add_inplace(dz1.values(), dr2.values());

  Matrix dr1 = layer_norm_backward(dz1, c.ln1, p.ln1_gain, g.ln1_gain, g.ln1_bias);
  matmul_at_acc(c.ctx, dr1, g.wo);
  Matrix dctx = matmul_bt(dr1, p.wo);
  Matrix dattn = matmul_bt(dctx, c.v);
  Matrix dv(n, c.v.cols());
  matmul_at_acc(c.attn, dctx, dv);
  Matrix dscores(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double inner = dot(c.attn.row(i), dattn.row(i));
    for (std::size_t j = 0; j < n; ++j) dscores(i, j) = c.attn(i, j) * (dattn(i, j) - inner) * scale;
  }
  Matrix dq = matmul(dscores, c.k);
  Matrix dk(n, c.k.cols());
  matmul_at_acc(dscores, c.q, dk);

  matmul_at_acc(c.x, dq, g.wq);
  matmul_at_acc(c.x, dk, g.wk);
  matmul_at_acc(c.x, dv, g.wv);
  Matrix dx = dr1;
  add_inplace(dx.values(), matmul_bt(dq, p.wq).values());
  add_inplace(dx.values(), matmul_bt(dk, p.wk).values());
  add_inplace(dx.values(), matmul_bt(dv, p.wv).values());
  return dx;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Row t of each matrix holds the value at time step t.
struct LstmTrace {
  Matrix z;  // [y_t; h_{t-1}]
  Matrix i, f, o, g, c, tanh_c, h;
};

/// Unidirectional single-layer LSTM with h_0 = c_0 = 0.
inline LstmTrace lstm_forward(const Matrix& y, const LstmParams& p) {
  if (y.rows() == 0) throw std::invalid_argument("lstm_forward: empty sequence");
  const std::size_t n = y.rows();
  const std::size_t d = y.cols();
  const std::size_t h = p.b_i.rows();
  if (p.w_i.cols() != d + h) throw std::invalid_argument("lstm_forward: input width does not match parameters");
  LstmTrace tr{Matrix(n, d + h), Matrix(n, h), Matrix(n, h), Matrix(n, h), Matrix(n, h),
               Matrix(n, h),     Matrix(n, h), Matrix(n, h)};
  for (std::size_t t = 0; t < n; ++t) {
    auto z = tr.z.row(t);
    std::copy(y.row(t).begin(), y.row(t).end(), z.begin());
    if (t > 0) std::copy(tr.h.row(t - 1).begin(), tr.h.row(t - 1).end(), z.begin() + static_cast<std::ptrdiff_t>(d));
    for (std::size_t k = 0; k < h; ++k) {
      const double ig = sigmoid(dot(p.w_i.row(k), z) + p.b_i(k, 0));
      const double fg = sigmoid(dot(p.w_f.row(k), z) + p.b_f(k, 0));
      const double og = sigmoid(dot(p.w_o.row(k), z) + p.b_o(k, 0));
      const double gg = std::tanh(dot(p.w_g.row(k), z) + p.b_g(k, 0));
      const double c_prev = t > 0 ? tr.c(t - 1, k) : 0.0;
      const double c = fg * c_prev + ig * gg;
      const double tc = std::tanh(c);
      tr.i(t, k) = ig;
      tr.f(t, k) = fg;
      tr.o(t, k) = og;
      tr.g(t, k) = gg;
      tr.c(t, k) = c;
      tr.tanh_c(t, k) = tc;
      tr.h(t, k) = og * tc;
    }
  }
  return tr;
}

/// Backpropagation through time from a gradient on the last hidden state.
/// Accumulates into `g`; returns dL/dy.
inline Matrix lstm_backward(std::span<const double> dh_last, const LstmTrace& tr, const LstmParams& p, LstmParams& g) {
  const std::size_t n = tr.h.rows();
  const std::size_t h = tr.h.cols();
  const std::size_t d = tr.z.cols() - h;
  Matrix dy(n, d);
  Vector dh(dh_last.begin(), dh_last.end());
  Vector dc(h, 0.0);
  Vector dpre_i(h), dpre_f(h), dpre_o(h), dpre_g(h);
  Vector dz(d + h);
  for (std::size_t step = n; step-- > 0;) {
    for (std::size_t k = 0; k < h; ++k) {
      const double o = tr.o(step, k);
      const double tc = tr.tanh_c(step, k);
      const double i = tr.i(step, k);
      const double f = tr.f(step, k);
      const double gg = tr.g(step, k);
      const double c_prev = step > 0 ? tr.c(step - 1, k) : 0.0;
      const double dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
      dpre_o[k] = dh[k] * tc * o * (1.0 - o);
      dpre_i[k] = dct * gg * i * (1.0 - i);
      dpre_f[k] = dct * c_prev * f * (1.0 - f);
      dpre_g[k] = dct * i * (1.0 - gg * gg);
      dc[k] = dct * f;
    }
    const auto z = tr.z.row(step);
    std::fill(dz.begin(), dz.end(), 0.0);
    auto gate = [&](const Matrix& w, Matrix& gw, Matrix& gb, const Vector& dpre) {
      for (std::size_t k = 0; k < h; ++k) {
        const double s = dpre[k];
        gb(k, 0) += s;
        if (s == 0.0) continue;
        auto gw_row = gw.row(k);
        const auto w_row = w.row(k);
        for (std::size_t j = 0; j < d + h; ++j) {
          gw_row[j] += s * z[j];
          dz[j] += s * w_row[j];
        }
      }
    };
    gate(p.w_i, g.w_i, g.b_i, dpre_i);
    gate(p.w_f, g.w_f, g.b_f, dpre_f);
    gate(p.w_o, g.w_o, g.b_o, dpre_o);
    gate(p.w_g, g.w_g, g.b_g, dpre_g);
    std::copy(dz.begin(), dz.begin() + static_cast<std::ptrdiff_t>(d), dy.row(step).begin());
    std::copy(dz.begin() + static_cast<std::ptrdiff_t>(d), dz.end(), dh.begin());
  }
  return dy;
}

/// Everything the backward pass needs from one forward pass.
struct SentenceTrace {
  std::vector<std::int32_t> ids;
  std::vector<BlockCache> blocks;
  Matrix tokens;  // output of the last block
  LstmTrace lstm;
  std::vector<std::size_t> argmax;  // per column, for max pooling
  Vector embedding;
};

/// Non-LSTM pooling over token vectors. `argmax` receives the first row
/// attaining each column maximum.
inline Vector pool_tokens(const Matrix& y, Pooling strategy, std::vector<std::size_t>* argmax = nullptr) {
  if (y.rows() == 0) throw std::invalid_argument("pool: empty sequence");
  const std::size_t n = y.rows();
  const std::size_t d = y.cols();
  switch (strategy) {
    case Pooling::cls: return Vector(y.row(0).begin(), y.row(0).end());
    case Pooling::mean: {
      Vector out(d, 0.0);
      for (std::size_t t = 0; t < n; ++t) add_inplace(out, y.row(t));
      for (auto& v : out) v /= static_cast<double>(n);
      return out;
    }
    case Pooling::max: {
      Vector out(y.row(0).begin(), y.row(0).end());
      std::vector<std::size_t> arg(d, 0);
      for (std::size_t t = 1; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j)
          if (y(t, j) > out[j]) {
            out[j] = y(t, j);
            arg[j] = t;
          }
      if (argmax) *argmax = std::move(arg);
      return out;
    }
    case Pooling::lstm: throw std::invalid_argument("pool_tokens: lstm pooling needs LSTM parameters");
  }
  throw std::invalid_argument("pool: unknown strategy");
}

inline Vector pool(const Matrix& y, Pooling strategy, const LstmParams& lstm) {
  if (strategy == Pooling::lstm) {
    const auto tr = lstm_forward(y, lstm);
    const auto last = tr.h.row(tr.h.rows() - 1);
    return Vector(last.begin(), last.end());
  }
  return pool_tokens(y, strategy);
}

inline SentenceTrace forward_ids(const std::vector<std::int32_t>& ids, const EncoderModel& model) {
  const auto& p = model.params;
  SentenceTrace tr;
  tr.ids = ids;
  Matrix x = embed_tokens(ids, p.embedding);
  tr.blocks.resize(p.blocks.size());
  for (std::size_t b = 0; b < p.blocks.size(); ++b) x = attention_block_forward(x, p.blocks[b], &tr.blocks[b]);
  tr.tokens = std::move(x);
  if (model.config.pooling == Pooling::lstm) {
    tr.lstm = lstm_forward(tr.tokens, p.lstm);
    const auto last = tr.lstm.h.row(tr.lstm.h.rows() - 1);
    tr.embedding.assign(last.begin(), last.end());
  } else {
    tr.embedding = pool_tokens(tr.tokens, model.config.pooling, &tr.argmax);
  }
  return tr;
}

inline SentenceTrace forward(std::string_view text, const EncoderModel& model) {
  return forward_ids(tokenize(text, model.vocab, model.config.max_len), model);
}

/// Sentence embedding; a pure function of (text, parameters).
inline Vector encode(std::string_view text, const EncoderModel& model) { return forward(text, model).embedding; }

/// Gradients of one sentence. `params` omits the embedding table; the
/// gradient w.r.t. the embedded token vectors is kept in `token_grads`
/// (row t belongs to ids[t]).
struct SentenceGradient {
  Parameters params;
  Matrix token_grads;
};

inline SentenceGradient sentence_backward(const SentenceTrace& tr, std::span<const double> upstream,
                                          const EncoderModel& model) {
  if (upstream.size() != tr.embedding.size()) {
    throw std::invalid_argument("sentence_backward: upstream gradient has dimension " +
                                std::to_string(upstream.size()) + ", embedding has " +
                                std::to_string(tr.embedding.size()));
  }
  const auto& p = model.params;
  SentenceGradient out{p.zeros_like(false), {}};
  const std::size_t n = tr.tokens.rows();
  const std::size_t d = tr.tokens.cols();
  Matrix dy(n, d);
  switch (model.config.pooling) {
    case Pooling::cls:
      std::copy(upstream.begin(), upstream.end(), dy.row(0).begin());
      break;
    case Pooling::mean:
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) dy(t, j) = upstream[j] / static_cast<double>(n);
      break;
    case Pooling::max:
      for (std::size_t j = 0; j < d; ++j) dy(tr.argmax[j], j) = upstream[j];
      break;
    case Pooling::lstm:
      dy = lstm_backward(upstream, tr.lstm, p.lstm, out.params.lstm);
      break;
  }
  for (std::size_t b = p.blocks.size(); b-- > 0;)
    dy = attention_block_backward(dy, p.blocks[b], tr.blocks[b], out.params.blocks[b]);
  out.token_grads = std::move(dy);
  return out;
}

/// Sums per-sentence gradients in index order into a full gradient buffer.
/// The result does not depend on how the sentences were scheduled.
inline Parameters reduce_gradients(const std::vector<SentenceTrace>& traces,
                                   const std::vector<SentenceGradient>& grads, const EncoderModel& model) {
  Parameters total = model.params.zeros_like(true);
  for (std::size_t s = 0; s < grads.size(); ++s) {
    total.accumulate(grads[s].params);
    const auto& ids = traces[s].ids;
    for (std::size_t t = 0; t < ids.size(); ++t)
      add_inplace(total.embedding.row(static_cast<std::size_t>(ids[t])), grads[s].token_grads.row(t));
  }
  return total;
}

/// Gradient of sum_s <upstream_s, encode(texts_s)> w.r.t. every parameter.
inline Parameters model_backward(const std::vector<std::string>& texts, const std::vector<Vector>& upstream,
                                 const EncoderModel& model, unsigned threads = 1) {
  if (texts.size() != upstream.size()) throw std::invalid_argument("model_backward: texts/gradients count mismatch");
  for (const auto& u : upstream)
    if (u.size() != model.output_dim()) throw std::invalid_argument("model_backward: upstream dimension mismatch");
  std::vector<SentenceTrace> traces(texts.size());
  std::vector<SentenceGradient> grads(texts.size());
  parallel_for(texts.size(), threads, [&](std::size_t s) {
    traces[s] = forward(texts[s], model);
    grads[s] = sentence_backward(traces[s], upstream[s], model);
  });
  return reduce_gradients(traces, grads, model);
}

/// Central differences (L(theta + eps) - L(theta - eps)) / (2 eps), one scalar
/// at a time. The model is restored after each probe.
inline Parameters finite_difference_grad(const std::function<double(const EncoderModel&)>& loss, EncoderModel model,
                                         double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_grad: eps must be positive");
  Parameters grad = model.params.zeros_like(true);
  std::vector<Matrix*> out;
  grad.for_each([&](const std::string&, Matrix& m) { out.push_back(&m); });
  std::size_t k = 0;
  model.params.for_each([&](const std::string&, Matrix& m) {
    Matrix& g = *out[k++];
    for (std::size_t i = 0; i < m.size(); ++i) {
      double& theta = m.values()[i];
      const double saved = theta;
      theta = saved + eps;
      const double up = loss(model);
      theta = saved - eps;
      const double down = loss(model);
      theta = saved;
      g.values()[i] = (up - down) / (2.0 * eps);
    }
  });
  return grad;
}

}  // namespace parasent
