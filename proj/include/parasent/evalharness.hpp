#pragma once

// Frozen-embedding probing. A one-hidden-layer network is fit on encoder
// outputs; classification tasks report accuracy, relatedness tasks report
// Spearman correlation of the probe's scalar predictions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "parasent/corpus.hpp"
#include "parasent/encoder.hpp"
#include "parasent/errors.hpp"
#include "parasent/numeric.hpp"
#include "parasent/training.hpp"

namespace parasent {

using Label = std::variant<std::string, double>;

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  return grid;
}

// ---------------------------------------------------------------------------
// Tasks

struct EvalTask {
  std::string name;
  TaskKind kind = TaskKind::classification;
  TaskArity arity = TaskArity::single;
  std::vector<EvalRecord> train;
  std::vector<EvalRecord> validation;
  std::vector<EvalRecord> test;

  void validate() const {
    auto fail = [&](const std::string& why) { throw ConfigError("task '" + name + "': " + why); };
    if (train.empty() || validation.empty() || test.empty()) fail("every split must be nonempty");
    const std::size_t width = arity == TaskArity::pair ? 2 : 1;
    std::map<std::string, int> classes;
    for (const auto* split : {&train, &validation, &test}) {
      for (const auto& r : *split) {
        if (r.sentences.size() != width) fail("record has the wrong number of sentences");
        if (r.is_classification() != (kind == TaskKind::classification)) fail("label type does not match task kind");
      }
    }
    if (kind != TaskKind::classification) return;
    for (const auto& r : train) classes[r.class_name()];
    for (const auto* split : {&validation, &test})
      for (const auto& r : *split)
        if (!classes.count(r.class_name())) fail("class '" + r.class_name() + "' not present in train split");
  }
};

inline EvalTask load_task(const std::string& name, TaskKind kind, TaskArity arity, const std::filesystem::path& train,
                          const std::filesystem::path& validation, const std::filesystem::path& test) {
  EvalTask t{name, kind, arity, read_eval_dataset(train, kind, arity), read_eval_dataset(validation, kind, arity),
             read_eval_dataset(test, kind, arity)};
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Features

/// u for single-sentence records, [u; v; |u - v|; u * v] for pairs.
inline Vector featurize(const EvalRecord& record, const EncoderModel& model) {
  if (record.sentences.size() == 1) return encode(record.sentences[0], model);
  if (record.sentences.size() != 2) throw std::invalid_argument("featurize: record must hold 1 or 2 sentences");
  const Vector u = encode(record.sentences[0], model);
  const Vector v = encode(record.sentences[1], model);
  const std::size_t d = u.size();
  Vector f(4 * d);
  for (std::size_t i = 0; i < d; ++i) {
    f[i] = u[i];
    f[d + i] = v[i];
    f[2 * d + i] = std::abs(u[i] - v[i]);
    f[3 * d + i] = u[i] * v[i];
  }
  return f;
}

inline std::vector<Vector> featurize_all(const std::vector<EvalRecord>& records, const EncoderModel& model,
                                         unsigned threads) {
  std::vector<Vector> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) { out[i] = featurize(records[i], model); });
  return out;
}

inline std::vector<Label> labels_of(const std::vector<EvalRecord>& records) {
  std::vector<Label> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (labels.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// 1-based ranks; tied values share the mean of the positions they span.
inline Vector average_ranks(const Vector& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  Vector ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const Vector& x, const Vector& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least two observations");
  if (!all_finite(x) || !all_finite(y)) throw std::invalid_argument("spearman: non-finite input");
  const Vector rx = average_ranks(x);
  const Vector ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;  // ranks always average to this
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = rx[i] - mean, b = ry[i] - mean;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::domain_error("spearman: constant input has no rank correlation");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Probe

struct ProbeConfig {
  std::size_t hidden = 64;
  std::size_t iterations = 200;
  double peak_lr = 1e-2;
  double warmup_ratio = 0.1;

  void validate() const {
    if (hidden == 0) throw ConfigError("probe hidden width must be >= 1");
    if (iterations == 0) throw ConfigError("probe iterations must be >= 1");
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("probe learning rate must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw ConfigError("probe warmup ratio must be in [0, 1]");
  }
};

struct ProbeModel {
  TaskKind kind = TaskKind::classification;
  double lambda = 0.0;
  std::vector<std::string> classes;  // sorted; output column j scores classes[j]
  Vector feature_mean, feature_scale;
  double target_mean = 0.0, target_scale = 1.0;
  Matrix w1, b1, w2, b2;  // D x H, 1 x H, H x C, 1 x C

  std::size_t hidden() const { return w1.cols(); }
  std::size_t outputs() const { return w2.cols(); }

  bool operator==(const ProbeModel&) const = default;
};

namespace detail {

inline Matrix standardized(const std::vector<Vector>& x, const ProbeModel& p) {
  const std::size_t d = p.feature_mean.size();
  Matrix out(x.size(), d);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != d) throw std::invalid_argument("probe: feature dimension mismatch");
    for (std::size_t j = 0; j < d; ++j) out(i, j) = (x[i][j] - p.feature_mean[j]) / p.feature_scale[j];
  }
  return out;
}

struct ProbeForward {
  Matrix hidden;  // tanh activations
  Matrix out;     // logits or standardized predictions
};

inline ProbeForward probe_forward(const Matrix& xs, const ProbeModel& p) {
  ProbeForward f;
  f.hidden = matmul(xs, p.w1);
  for (std::size_t i = 0; i < f.hidden.rows(); ++i)
    for (std::size_t j = 0; j < f.hidden.cols(); ++j) f.hidden(i, j) = std::tanh(f.hidden(i, j) + p.b1(0, j));
  f.out = matmul(f.hidden, p.w2);
  for (std::size_t i = 0; i < f.out.rows(); ++i)
    for (std::size_t j = 0; j < f.out.cols(); ++j) f.out(i, j) += p.b2(0, j);
  return f;
}

}  // namespace detail

struct ProbeGradient {
  Matrix w1, b1, w2, b2;
};

/// Data loss (mean cross-entropy, or mean squared error on standardized
/// targets) plus (lambda / 2) * ||W||^2 over both weight matrices. `targets`
/// holds class indices or standardized scores.
inline double probe_objective(const ProbeModel& p, const Matrix& xs, const Vector& targets, ProbeGradient* grad) {
  const auto f = detail::probe_forward(xs, p);
  const std::size_t n = xs.rows();
  const std::size_t c = p.outputs();
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix d_out(n, c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (p.kind == TaskKind::classification) {
      const auto row = f.out.row(i);
      const double lse = logsumexp(Vector(row.begin(), row.end()));
      const auto y = static_cast<std::size_t>(targets[i]);
      loss += lse - row[y];
      for (std::size_t j = 0; j < c; ++j) d_out(i, j) = (std::exp(row[j] - lse) - (j == y ? 1.0 : 0.0)) * inv_n;
    } else {
      const double r = f.out(i, 0) - targets[i];
      loss += r * r;
      d_out(i, 0) = 2.0 * r * inv_n;
    }
  }
  loss *= inv_n;
  double sq = 0.0;
  for (double w : p.w1.values()) sq += w * w;
  for (double w : p.w2.values()) sq += w * w;
  loss += 0.5 * p.lambda * sq;
  if (!grad) return loss;

  grad->w2 = Matrix(p.w2.rows(), p.w2.cols());
  matmul_at_acc(f.hidden, d_out, grad->w2);
  grad->b2 = Matrix(1, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) grad->b2(0, j) += d_out(i, j);
  Matrix dz = matmul_bt(d_out, p.w2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dz.cols(); ++j) dz(i, j) *= 1.0 - f.hidden(i, j) * f.hidden(i, j);
  grad->w1 = Matrix(p.w1.rows(), p.w1.cols());
  matmul_at_acc(xs, dz, grad->w1);
  grad->b1 = Matrix(1, dz.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dz.cols(); ++j) grad->b1(0, j) += dz(i, j);
  for (std::size_t k = 0; k < p.w1.size(); ++k) grad->w1.values()[k] += p.lambda * p.w1.values()[k];
  for (std::size_t k = 0; k < p.w2.size(); ++k) grad->w2.values()[k] += p.lambda * p.w2.values()[k];
  return loss;
}

/// Encodes labels as the targets probe_objective expects.
inline Vector probe_targets(const ProbeModel& p, const std::vector<Label>& labels) {
  Vector t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (p.kind == TaskKind::classification) {
      const auto& name = std::get<std::string>(labels[i]);
      const auto it = std::lower_bound(p.classes.begin(), p.classes.end(), name);
      if (it == p.classes.end() || *it != name) throw std::invalid_argument("probe: unknown class '" + name + "'");
      t[i] = static_cast<double>(it - p.classes.begin());
    } else {
      t[i] = (std::get<double>(labels[i]) - p.target_mean) / p.target_scale;
    }
  }
  return t;
}

inline ProbeModel train_probe(const std::vector<Vector>& features, const std::vector<Label>& labels, TaskKind kind,
                              double lambda, std::uint64_t seed, const ProbeConfig& config = {}) {
  config.validate();
  if (features.size() != labels.size()) throw std::invalid_argument("train_probe: features/labels length mismatch");
  if (features.size() < 2) throw std::invalid_argument("train_probe: need at least two records");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("train_probe: lambda must be >= 0");
  const std::size_t n = features.size();
  const std::size_t d = features[0].size();
  if (d == 0) throw std::invalid_argument("train_probe: empty features");

  ProbeModel p;
  p.kind = kind;
  p.lambda = lambda;
  for (const auto& l : labels) {
    const bool is_class = std::holds_alternative<std::string>(l);
    if (is_class != (kind == TaskKind::classification)) throw std::invalid_argument("train_probe: label type mismatch");
    if (is_class) p.classes.push_back(std::get<std::string>(l));
  }
  std::sort(p.classes.begin(), p.classes.end());
  p.classes.erase(std::unique(p.classes.begin(), p.classes.end()), p.classes.end());
  if (kind == TaskKind::classification && p.classes.size() < 2) {
    throw std::invalid_argument("train_probe: training set has a single class");
  }
  if (kind == TaskKind::regression) {
    double sum = 0.0, sq = 0.0;
    for (const auto& l : labels) sum += std::get<double>(l);
    p.target_mean = sum / static_cast<double>(n);
    for (const auto& l : labels) sq += std::pow(std::get<double>(l) - p.target_mean, 2);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    p.target_scale = sd > 0.0 ? sd : 1.0;
  }

  p.feature_mean.assign(d, 0.0);
  p.feature_scale.assign(d, 0.0);
  for (const auto& x : features) {
    if (x.size() != d) throw std::invalid_argument("train_probe: ragged features");
    if (!all_finite(x)) throw std::invalid_argument("train_probe: non-finite feature");
    for (std::size_t j = 0; j < d; ++j) p.feature_mean[j] += x[j];
  }
  for (auto& m : p.feature_mean) m /= static_cast<double>(n);
  for (const auto& x : features)
    for (std::size_t j = 0; j < d; ++j) p.feature_scale[j] += std::pow(x[j] - p.feature_mean[j], 2);
  for (auto& s : p.feature_scale) {
    s = std::sqrt(s / static_cast<double>(n));
    if (!(s > 1e-12)) s = 1.0;
  }

  const std::size_t h = config.hidden;
  const std::size_t c = kind == TaskKind::classification ? p.classes.size() : 1;
  SeededRng rng = SeededRng(seed).split("probe");
  p.w1 = Matrix(d, h);
  p.b1 = Matrix(1, h);
  p.w2 = Matrix(h, c);
  p.b2 = Matrix(1, c);
  detail::xavier_fill(p.w1, d, h, rng);
  detail::xavier_fill(p.w2, h, c, rng);

  const Matrix xs = detail::standardized(features, p);
  const Vector targets = probe_targets(p, labels);
  AdamWConfig opt;
  opt.weight_decay = 0.0;  // the L2 term lives in the objective
  AdamWState state;
  ProbeGradient g;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double loss = probe_objective(p, xs, targets, &g);
    if (!std::isfinite(loss)) throw DivergenceError("probe: non-finite loss");
    const double lr = lr_schedule(it, config.iterations, config.peak_lr, config.warmup_ratio);
    adamw_step({p.w1.values(), p.b1.values(), p.w2.values(), p.b2.values()},
               {g.w1.values(), g.b1.values(), g.w2.values(), g.b2.values()}, state, lr, opt);
  }
  return p;
}

/// Raw outputs in label space: class scores, or de-standardized predictions.
inline Matrix probe_outputs(const ProbeModel& p, const std::vector<Vector>& features) {
  if (features.empty()) return Matrix(0, p.outputs());
  auto out = detail::probe_forward(detail::standardized(features, p), p).out;
  if (p.kind == TaskKind::regression)
    for (auto& v : out.values()) v = v * p.target_scale + p.target_mean;
  return out;
}

inline std::vector<std::string> predict_classes(const ProbeModel& p, const std::vector<Vector>& features) {
  if (p.kind != TaskKind::classification) throw std::invalid_argument("predict_classes: regression probe");
  const Matrix out = probe_outputs(p, features);
  std::vector<std::string> pred;
  pred.reserve(out.rows());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto row = out.row(i);
    pred.push_back(p.classes[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())]);
  }
  return pred;
}

inline Vector predict_scores(const ProbeModel& p, const std::vector<Vector>& features) {
  if (p.kind != TaskKind::regression) throw std::invalid_argument("predict_scores: classification probe");
  const Matrix out = probe_outputs(p, features);
  return Vector(out.values().begin(), out.values().end());
}

// ---------------------------------------------------------------------------
// Protocol

struct EvalResult {
  std::string task;
  std::string metric;  // "accuracy" or "spearman"
  double value = 0.0;
  double lambda = 0.0;
};

inline std::string metric_name(TaskKind kind) { return kind == TaskKind::classification ? "accuracy" : "spearman"; }

/// Accuracy or Spearman of a probe on one split. A probe whose predictions
/// are all equal carries no ranking information and scores 0.
inline double score_probe(const ProbeModel& p, const std::vector<Vector>& features, const std::vector<Label>& labels) {
  if (p.kind == TaskKind::classification) {
    std::vector<std::string> truth;
    truth.reserve(labels.size());
    for (const auto& l : labels) truth.push_back(std::get<std::string>(l));
    return accuracy(predict_classes(p, features), truth);
  }
  Vector truth;
  truth.reserve(labels.size());
  for (const auto& l : labels) truth.push_back(std::get<double>(l));
  const Vector pred = predict_scores(p, features);
  if (std::all_of(pred.begin(), pred.end(), [&](double v) { return v == pred[0]; })) return 0.0;
  return spearman(pred, truth);
}

struct LabeledFeatures {
  std::vector<Vector> features;
  std::vector<Label> labels;
};

/// Picks the lambda with the best validation score; ties go to the smaller
/// lambda. Only train and validation data reach this function.
inline double select_lambda(const LabeledFeatures& train, const LabeledFeatures& validation, TaskKind kind,
                            const std::vector<double>& grid, std::uint64_t seed, const ProbeConfig& config,
                            unsigned threads) {
  if (grid.empty()) throw ConfigError("lambda grid is empty");
  std::vector<double> scores(grid.size());
  parallel_for(grid.size(), threads, [&](std::size_t i) {
    const auto probe = train_probe(train.features, train.labels, kind, grid[i], seed, config);
    scores[i] = score_probe(probe, validation.features, validation.labels);
  });
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] < grid[best])) best = i;
  }
  return grid[best];
}

inline EvalResult evaluate(const EncoderModel& model, const EvalTask& task,
                           const std::vector<double>& grid = default_lambda_grid(), std::uint64_t seed = 0,
                           const ProbeConfig& config = {}, unsigned threads = 1) {
  task.validate();
  for (double l : grid)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda grid values must be finite and >= 0");
  const LabeledFeatures train{featurize_all(task.train, model, threads), labels_of(task.train)};
  const LabeledFeatures validation{featurize_all(task.validation, model, threads), labels_of(task.validation)};
  const double lambda = select_lambda(train, validation, task.kind, grid, seed, config, threads);
  const auto probe = train_probe(train.features, train.labels, task.kind, lambda, seed, config);

  const auto test_features = featurize_all(task.test, model, threads);
  EvalResult r;
  r.task = task.name;
  r.metric = metric_name(task.kind);
  r.value = score_probe(probe, test_features, labels_of(task.test));
  r.lambda = lambda;
  return r;
}

inline void write_results_csv(const std::vector<EvalResult>& results, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "task,metric,value,lambda\n";
  for (const auto& r : results) out << r.task << ',' << r.metric << ',' << format_real(r.value) << ',' << format_real(r.lambda) << '\n';
  out.flush();
  if (!out) throw IoError("write failure: " + path.string());
}

}  // namespace parasent
