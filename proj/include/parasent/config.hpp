#pragma once

// Run configuration: one JSON document drives mine, train, encode and eval.
// Relative paths resolve against the directory holding the config file.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "parasent/checkpoint.hpp"
#include "parasent/corpus.hpp"
#include "parasent/encoder.hpp"
#include "parasent/errors.hpp"
#include "parasent/evalharness.hpp"
#include "parasent/json_util.hpp"
#include "parasent/mining.hpp"
#include "parasent/training.hpp"

namespace parasent {

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::classification;
  TaskArity arity = TaskArity::single;
  std::filesystem::path train, validation, test;
};

struct RunConfig {
  std::uint64_t seed = 0;
  unsigned threads = 1;  // 0 = all hardware threads

  struct Paths {
    std::optional<std::filesystem::path> corpus;         // source<TAB>target
    std::optional<std::filesystem::path> corpus_source;  // line-aligned pair of files
    std::optional<std::filesystem::path> corpus_target;
    std::optional<std::filesystem::path> filter_embeddings;
    std::optional<std::filesystem::path> pairs;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> loss_csv;
    std::optional<std::filesystem::path> results;
    std::optional<std::filesystem::path> encode_input;
    std::optional<std::filesystem::path> encode_output;
  } paths;

  MiningConfig mining;
  std::string filter = "hashed";  // hashed | precomputed
  std::size_t filter_dim = 256;

  EncoderConfig encoder;
  std::size_t vocab_min_count = 1;
  TrainConfig training;

  ProbeConfig probe;
  std::vector<double> lambda_grid = default_lambda_grid();
  std::vector<TaskSpec> tasks;

  /// The seed reaches every stage; each stage draws from its own named stream.
  void set_seed(std::uint64_t s) {
    seed = s;
    mining.seed = s;
    training.seed = s;
  }
};

/// Throws ConfigError naming the key when a command needs an undeclared path.
inline const std::filesystem::path& require_path(const std::optional<std::filesystem::path>& p, const char* key) {
  if (!p) throw ConfigError("config: paths." + std::string(key) + " is required for this command");
  return *p;
}

namespace detail {

inline TaskKind parse_task_kind(const std::string& s, const std::string& where) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  throw ConfigError(where + ": kind must be 'classification' or 'regression'");
}

inline TaskArity parse_task_arity(const std::string& s, const std::string& where) {
  if (s == "single") return TaskArity::single;
  if (s == "pair") return TaskArity::pair;
  throw ConfigError(where + ": arity must be 'single' or 'pair'");
}

inline void read_path(StrictObject& o, const std::string& key, std::optional<std::filesystem::path>& out,
                      const std::filesystem::path& base) {
  if (!o.has(key)) return;
  const auto s = o.require<std::string>(key);
  if (s.empty()) throw ConfigError(o.path(key) + ": empty path");
  out = base / std::filesystem::path(s);
}

}  // namespace detail

inline RunConfig parse_run_config(const Json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  StrictObject root(j, "config");
  std::uint64_t seed = 0;
  root.read("seed", seed);
  root.read("threads", c.threads);

  if (root.has("paths")) {
    StrictObject p(root.at("paths"), "config.paths");
    detail::read_path(p, "corpus", c.paths.corpus, base_dir);
    detail::read_path(p, "corpus_source", c.paths.corpus_source, base_dir);
    detail::read_path(p, "corpus_target", c.paths.corpus_target, base_dir);
    detail::read_path(p, "filter_embeddings", c.paths.filter_embeddings, base_dir);
    detail::read_path(p, "pairs", c.paths.pairs, base_dir);
    detail::read_path(p, "checkpoint", c.paths.checkpoint, base_dir);
    detail::read_path(p, "loss_csv", c.paths.loss_csv, base_dir);
    detail::read_path(p, "results", c.paths.results, base_dir);
    detail::read_path(p, "encode_input", c.paths.encode_input, base_dir);
    detail::read_path(p, "encode_output", c.paths.encode_output, base_dir);
    p.finish();
    if (c.paths.corpus && (c.paths.corpus_source || c.paths.corpus_target))
      throw ConfigError("config.paths: give either corpus or corpus_source/corpus_target, not both");
    if (c.paths.corpus_source.has_value() != c.paths.corpus_target.has_value())
      throw ConfigError("config.paths: corpus_source and corpus_target go together");
  }

  if (root.has("mining")) {
    StrictObject m(root.at("mining"), "config.mining");
    m.read("threshold", c.mining.threshold);
    m.read("min_group_size", c.mining.min_group_size);
    m.read("filter", c.filter);
    m.read("filter_dim", c.filter_dim);
    m.finish();
  }
  c.mining.validate();
  if (c.filter != "hashed" && c.filter != "precomputed")
    throw ConfigError("config.mining.filter: must be 'hashed' or 'precomputed'");
  if (c.filter == "hashed" && c.filter_dim < 16) throw ConfigError("config.mining.filter_dim: must be >= 16");
  if (c.filter == "precomputed" && !c.paths.filter_embeddings)
    throw ConfigError("config.mining.filter: 'precomputed' needs paths.filter_embeddings");
  if (c.mining.min_group_size < 2) throw ConfigError("config.mining.min_group_size: must be >= 2");

  if (root.has("encoder")) c.encoder = encoder_config_from_json(root.at("encoder"), "config.encoder");

  if (root.has("training")) {
    StrictObject t(root.at("training"), "config.training");
    t.read("batch_size", c.training.batch_size);
    t.read("epochs", c.training.epochs);
    t.read("peak_lr", c.training.peak_lr);
    t.read("warmup_ratio", c.training.warmup_ratio);
    t.read("temperature", c.training.temperature);
    t.read("weight_decay", c.training.adamw.weight_decay);
    t.read("beta1", c.training.adamw.beta1);
    t.read("beta2", c.training.adamw.beta2);
    t.read("adam_eps", c.training.adamw.eps);
    t.read("vocab_min_count", c.vocab_min_count);
    t.finish();
  }
  c.training.validate();
  if (c.vocab_min_count < 1) throw ConfigError("config.training.vocab_min_count: must be >= 1");

  if (root.has("eval")) {
    StrictObject e(root.at("eval"), "config.eval");
    e.read("lambda_grid", c.lambda_grid);
    e.read("hidden", c.probe.hidden);
    e.read("iterations", c.probe.iterations);
    e.read("peak_lr", c.probe.peak_lr);
    e.read("warmup_ratio", c.probe.warmup_ratio);
    if (e.has("tasks")) {
      const Json& tasks = e.at("tasks");
      if (!tasks.is_array()) throw ConfigError("config.eval.tasks: expected an array");
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        const std::string where = "config.eval.tasks[" + std::to_string(i) + "]";
        StrictObject t(tasks[i], where);
        TaskSpec spec;
        spec.name = t.require<std::string>("name");
        if (spec.name.empty() || spec.name.find_first_of(",\"\n\r") != std::string::npos)
          throw ConfigError(where + ".name: must be nonempty without commas, quotes or newlines");
        for (const auto& other : c.tasks)
          if (other.name == spec.name) throw ConfigError(where + ".name: duplicate task '" + spec.name + "'");
        spec.kind = detail::parse_task_kind(t.require<std::string>("kind"), where);
        spec.arity = detail::parse_task_arity(t.require<std::string>("arity"), where);
        std::optional<std::filesystem::path> tr, va, te;
        detail::read_path(t, "train", tr, base_dir);
        detail::read_path(t, "validation", va, base_dir);
        detail::read_path(t, "test", te, base_dir);
        if (!tr || !va || !te) throw ConfigError(where + ": train, validation and test paths are required");
        spec.train = *tr;
        spec.validation = *va;
        spec.test = *te;
        t.finish();
        c.tasks.push_back(std::move(spec));
      }
    }
    e.finish();
  }
  if (c.lambda_grid.empty()) throw ConfigError("config.eval.lambda_grid: must not be empty");
  for (double l : c.lambda_grid)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("config.eval.lambda_grid: values must be finite and >= 0");
  c.probe.validate();

  root.finish();
  c.set_seed(seed);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  auto in = open_input(path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed config: " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace parasent
