#pragma once

// Siamese fine-tuning with the multiple-negatives-ranking objective. Both
// sentences of every pair go through the same EncoderModel; anchor i is
// scored against every positive of its batch and the loss asks the own
// positive to win the softmax over the row.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "parasent/corpus.hpp"
#include "parasent/encoder.hpp"
#include "parasent/errors.hpp"
#include "parasent/numeric.hpp"

namespace parasent {

// ---------------------------------------------------------------------------
// Loss

/// S(i, j) = cos(anchor_i, positive_j) / temperature.
inline Matrix similarity_matrix(const std::vector<Vector>& anchors, const std::vector<Vector>& positives,
                                double temperature = 1.0) {
  if (anchors.empty() || anchors.size() != positives.size()) {
    throw std::invalid_argument("similarity_matrix: need K >= 1 anchors and as many positives");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("similarity_matrix: temperature must be positive");
  const std::size_t k = anchors.size();
  Matrix s(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) s(i, j) = cosine_similarity(anchors[i], positives[j]) / temperature;
  return s;
}

/// J = -(1/K) sum_i (S_ii - logsumexp_j S_ij).
inline double mnr_loss(const Matrix& s) {
  if (s.rows() != s.cols() || s.rows() == 0) throw std::invalid_argument("mnr_loss: expected a nonempty square matrix");
  const std::size_t k = s.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += logsumexp(s.row(i)) - s(i, i);
  return total / static_cast<double>(k);
}

/// dJ/dS_ij = (softmax_i(S)_j - [i == j]) / K.
inline Matrix mnr_loss_grad(const Matrix& s) {
  if (s.rows() != s.cols() || s.rows() == 0) {
    throw std::invalid_argument("mnr_loss_grad: expected a nonempty square matrix");
  }
  const std::size_t k = s.rows();
  const double inv_k = 1.0 / static_cast<double>(k);
  Matrix g(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    const double lse = logsumexp(s.row(i));
    for (std::size_t j = 0; j < k; ++j) g(i, j) = std::exp(s(i, j) - lse);
    // Diagonal is set so the row sums to zero: softmax_ii - 1 = -sum_{j!=i} softmax_ij.
    double off = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) off += g(i, j);
    g(i, i) = 0.0 - off;
    for (auto& v : g.row(i)) v *= inv_k;
  }
  return g;
}

/// Gradient of cos(x, y) with respect to x.
inline Vector cosine_grad_x(std::span<const double> x, std::span<const double> y) {
  const double nx = l2_norm(x);
  const double ny = l2_norm(y);
  const double c = dot(x, y) / (nx * ny);
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = y[i] / (nx * ny) - c * x[i] / (nx * nx);
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::uint64_t step = 0;
};

/// One AdamW update with decoupled weight decay:
///   theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
/// A non-finite gradient aborts before anything is modified.
inline void adamw_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                       AdamWState& state, double lr, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adamw_step: tensor count mismatch");
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].size() != grads[t].size()) throw std::invalid_argument("adamw_step: shape mismatch");
    if (!all_finite(grads[t])) throw DivergenceError("adamw_step: non-finite gradient in tensor " + std::to_string(t));
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double g = grads[t][i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      double& theta = params[t][i];
      theta -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta);
    }
  }
}

inline void adamw_step(Parameters& params, const Parameters& grads, AdamWState& state, double lr,
                       const AdamWConfig& cfg) {
  std::vector<std::span<double>> p;
  std::vector<std::span<const double>> g;
  params.for_each([&](const std::string&, Matrix& m) { p.push_back(m.values()); });
  grads.for_each([&](const std::string&, const Matrix& m) { g.push_back(m.values()); });
  adamw_step(p, g, state, lr, cfg);
}

/// Linear ramp 0 -> peak over the first ceil(warmup_ratio * total) steps,
/// then linear decay to 0 at `total`.
inline double lr_schedule(std::size_t step, std::size_t total, double peak, double warmup_ratio) {
  if (total < 1) throw std::invalid_argument("lr_schedule: total_steps must be >= 1");
  if (step > total) throw std::invalid_argument("lr_schedule: step beyond total_steps");
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw std::invalid_argument("lr_schedule: warmup_ratio outside [0,1]");
  const auto warmup =
      std::min(total, static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total) - 1e-9)));
  const auto s = static_cast<double>(step);
  if (step <= warmup && warmup > 0) return peak * s / static_cast<double>(warmup);
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

// ---------------------------------------------------------------------------
// Batching

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 3;
  double peak_lr = 1e-3;
  double warmup_ratio = 0.10;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  double temperature = 1.0;

  /// Fine-tuning values used for a pretrained 125M-parameter model.
  static TrainConfig pretrained_preset() {
    TrainConfig c;
    c.peak_lr = 2e-6;
    return c;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw ConfigError("training: warmup_ratio outside [0,1]");
    if (!(peak_lr > 0.0)) throw ConfigError("training: peak_lr must be positive");
    if (!(temperature > 0.0)) throw ConfigError("training: temperature must be positive");
  }
};

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;  // indices into the pair list
  std::size_t unresolved_duplicates = 0;
};

namespace detail {
// Trade a duplicate with an already-placed pair from an earlier batch that
// does not hold the duplicated positive.
inline bool swap_backward(const std::vector<ParaphrasePair>& pairs, std::vector<std::size_t>& order, std::size_t k,
                          std::size_t start, std::size_t pos, const std::unordered_set<std::string_view>& seen) {
  const std::string_view dup = pairs[order[pos]].b;
  for (std::size_t b = 0; b < start; b += k) {
    bool has_dup = false;
    for (std::size_t i = b; i < b + k; ++i) has_dup |= pairs[order[i]].b == dup;
    if (has_dup) continue;
    for (std::size_t i = b; i < b + k; ++i) {
      if (seen.count(pairs[order[i]].b)) continue;
      std::swap(order[i], order[pos]);
      return true;
    }
  }
  return false;
}
}  // namespace detail

/// One epoch of batches: shuffle, then chunk into batches of K. A positive
/// whose text already occurs among the batch's positives is swapped with a
/// not-yet-batched pair when one exists, otherwise with a pair
/// from an earlier batch. A final chunk of a single pair is
/// dropped unless it is the only batch.
inline BatchPlan make_batches(const std::vector<ParaphrasePair>& pairs, std::size_t k, SeededRng& rng) {
  if (pairs.empty()) throw std::invalid_argument("make_batches: empty dataset");
  if (k < 1) throw std::invalid_argument("make_batches: K must be >= 1");
  const std::size_t n = pairs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle_inplace(order, rng);
  BatchPlan plan;
  for (std::size_t start = 0; start < n; start += k) {
    const std::size_t end = std::min(n, start + k);
    std::unordered_set<std::string_view> seen;
    for (std::size_t pos = start; pos < end; ++pos) {
      if (seen.count(pairs[order[pos]].b)) {
        std::size_t q = end;
        while (q < n && seen.count(pairs[order[q]].b)) ++q;
        if (q < n) {
          std::swap(order[pos], order[q]);
        } else if (!detail::swap_backward(pairs, order, k, start, pos, seen)) {
          ++plan.unresolved_duplicates;
        }
      }
      seen.insert(pairs[order[pos]].b);
    }
    plan.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (plan.batches.size() > 1 && plan.batches.back().size() < 2) plan.batches.pop_back();
  return plan;
}

inline std::size_t batches_per_epoch(std::size_t num_pairs, std::size_t k) {
  if (num_pairs == 0) return 0;
  const std::size_t full = num_pairs / k;
  const std::size_t rest = num_pairs % k;
  if (full == 0) return 1;
  return full + (rest >= 2 ? 1 : 0);
}

// ---------------------------------------------------------------------------
// Loss and gradient of one batch

struct BatchResult {
  double loss = 0.0;
  Matrix similarities;
  Parameters grad;
};

inline std::vector<std::string> batch_texts(const std::vector<ParaphrasePair>& batch) {
  std::vector<std::string> texts;
  texts.reserve(2 * batch.size());
  for (const auto& p : batch) texts.push_back(p.a);
  for (const auto& p : batch) texts.push_back(p.b);
  return texts;
}

/// Forward-only loss, used for finite-difference checks.
inline double batch_loss(const EncoderModel& model, const std::vector<ParaphrasePair>& batch, double temperature = 1.0) {
  std::vector<Vector> a;
  std::vector<Vector> b;
  for (const auto& p : batch) {
    a.push_back(encode(p.a, model));
    b.push_back(encode(p.b, model));
  }
  return mnr_loss(similarity_matrix(a, b, temperature));
}

/// Loss and parameter gradient of one batch. Both towers share `model`, so
/// their gradients land in the same tensors. Work is spread over `threads`
/// with a fixed-order reduction.
inline BatchResult batch_gradient(const EncoderModel& model, const std::vector<ParaphrasePair>& batch,
                                  double temperature = 1.0, unsigned threads = 1) {
  const std::size_t k = batch.size();
  const auto texts = batch_texts(batch);
  std::vector<SentenceTrace> traces(texts.size());
  parallel_for(texts.size(), threads, [&](std::size_t s) { traces[s] = forward(texts[s], model); });

  std::vector<Vector> a(k);
  std::vector<Vector> b(k);
  for (std::size_t i = 0; i < k; ++i) {
    a[i] = traces[i].embedding;
    b[i] = traces[k + i].embedding;
  }
  BatchResult out;
  out.similarities = similarity_matrix(a, b, temperature);
  out.loss = mnr_loss(out.similarities);
  const Matrix ds = mnr_loss_grad(out.similarities);

  std::vector<Vector> upstream(2 * k, Vector(model.output_dim(), 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double w = ds(i, j) / temperature;
      if (w == 0.0) continue;
      const auto ga = cosine_grad_x(a[i], b[j]);
      const auto gb = cosine_grad_x(b[j], a[i]);
      for (std::size_t c = 0; c < ga.size(); ++c) {
        upstream[i][c] += w * ga[c];
        upstream[k + j][c] += w * gb[c];
      }
    }
  }
  std::vector<SentenceGradient> grads(texts.size());
  parallel_for(texts.size(), threads,
               [&](std::size_t s) { grads[s] = sentence_backward(traces[s], upstream[s], model); });
  out.grad = reduce_gradients(traces, grads, model);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  EncoderModel model;
  std::vector<LossRecord> history;
  std::size_t unresolved_duplicates = 0;
};

/// Runs config.epochs passes over `pairs`. The learning rate of update k
/// (0-based, over all epochs) is lr_schedule(k, total_steps, ...).
inline TrainResult train(const std::vector<ParaphrasePair>& pairs, EncoderModel model, const TrainConfig& config,
                         unsigned threads = 1, const std::function<void(const LossRecord&)>& on_step = {}) {
  config.validate();
  TrainResult result{std::move(model), {}, 0};
  if (config.epochs == 0) return result;
  if (pairs.empty()) throw std::invalid_argument("train: empty dataset");

  const std::size_t per_epoch = batches_per_epoch(pairs.size(), config.batch_size);
  const std::size_t total = per_epoch * config.epochs;
  const SeededRng stream = SeededRng(config.seed).split("training");
  AdamWState state;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto rng = stream.derive(epoch);
    const auto plan = make_batches(pairs, config.batch_size, rng);
    result.unresolved_duplicates += plan.unresolved_duplicates;
    for (const auto& indices : plan.batches) {
      std::vector<ParaphrasePair> batch;
      batch.reserve(indices.size());
      for (auto i : indices) batch.push_back(pairs[i]);
      BatchResult br;
      try {
        br = batch_gradient(result.model, batch, config.temperature, threads);
      } catch (const std::domain_error& e) {
        throw DivergenceError("step " + std::to_string(step) + ": degenerate embedding (" + e.what() + ")");
      }
      if (!std::isfinite(br.loss)) throw DivergenceError("step " + std::to_string(step) + ": non-finite loss");
      const double lr = lr_schedule(step, total, config.peak_lr, config.warmup_ratio);
      try {
        adamw_step(result.model.params, br.grad, state, lr, config.adamw);
      } catch (const DivergenceError& e) {
        throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
      }
      LossRecord rec{step, epoch, lr, br.loss};
      result.history.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  return result;
}

inline std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "step,epoch,lr,loss\n";
  for (const auto& r : history)
    out << r.step << ',' << r.epoch << ',' << format_real(r.lr) << ',' << format_real(r.loss) << '\n';
  out.flush();
  if (!out) throw IoError("write failure: " + path.string());
}

}  // namespace parasent
