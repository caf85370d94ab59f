#pragma once

// Subcommands behind the `parasent` executable. Exit codes: 0 success,
// 1 I/O failure, 2 configuration or input error, 3 numeric divergence.

#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "parasent/checkpoint.hpp"
#include "parasent/config.hpp"
#include "parasent/corpus.hpp"
#include "parasent/encoder.hpp"
#include "parasent/errors.hpp"
#include "parasent/evalharness.hpp"
#include "parasent/mining.hpp"
#include "parasent/training.hpp"

namespace parasent {

enum ExitCode : int { kExitOk = 0, kExitIo = 1, kExitConfig = 2, kExitDivergence = 3 };

inline std::unique_ptr<FilterEncoder> make_filter_encoder(const RunConfig& c) {
  if (c.filter == "precomputed") return std::make_unique<PrecomputedEncoder>(*c.paths.filter_embeddings);
  return std::make_unique<HashedNgramEncoder>(c.filter_dim);
}

inline MiningStats cmd_mine(const RunConfig& c, std::ostream& out) {
  const auto& pairs_path = require_path(c.paths.pairs, "pairs");
  if (!c.paths.corpus && !c.paths.corpus_source) throw ConfigError("config: paths.corpus is required for mine");
  const auto enc = make_filter_encoder(c);
  MiningResult result;
  if (c.paths.corpus) {
    ParallelTsvReader reader(*c.paths.corpus);
    result = mine_stream(reader, *enc, c.mining, c.threads);
  } else {
    MosesReader reader(*c.paths.corpus_source, *c.paths.corpus_target);
    result = mine_stream(reader, *enc, c.mining, c.threads);
  }
  write_pairs(result.pairs, pairs_path);
  const auto& s = result.stats;
  out << "input pairs: " << s.input_pairs << '\n'
      << "skipped lines: " << s.skipped_lines << '\n'
      << "encoder failures: " << s.encoder_failures << '\n'
      << "filtered survivors: " << s.filtered_survivors << '\n'
      << "groups: " << s.groups << '\n'
      << "groups >= " << c.mining.min_group_size << ": " << s.groups_ge2 << '\n'
      << "duplicate pairs dropped: " << s.duplicate_pairs << '\n'
      << "emitted pairs: " << s.emitted_pairs << '\n';
  return s;
}

/// Vocabulary over both sides of every pair, then a seeded initialization.
inline EncoderModel initial_model(const RunConfig& c, const std::vector<ParaphrasePair>& pairs) {
  std::vector<std::string> texts;
  texts.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    texts.push_back(p.a);
    texts.push_back(p.b);
  }
  return init_model(c.encoder, build_vocabulary(texts, c.vocab_min_count), SeededRng(c.seed).split("init"));
}

inline TrainResult cmd_train(const RunConfig& c, std::ostream& out) {
  const auto& pairs_path = require_path(c.paths.pairs, "pairs");
  const auto& ckpt_path = require_path(c.paths.checkpoint, "checkpoint");
  const auto& loss_path = require_path(c.paths.loss_csv, "loss_csv");
  ReadStats stats;
  const auto pairs = read_pairs(pairs_path, &stats);
  if (pairs.empty() && c.training.epochs > 0) throw ConfigError(pairs_path.string() + ": no usable pairs");
  auto model = initial_model(c, pairs);
  out << "pairs: " << pairs.size() << " (skipped lines: " << stats.skipped << ")\n"
      << "vocabulary: " << model.vocab.size() << '\n'
      << "parameters: " << model.params.scalar_count() << '\n';
  if (!pairs.empty()) out << "batches per epoch: " << batches_per_epoch(pairs.size(), c.training.batch_size) << '\n';

  std::size_t current_epoch = 0;
  double epoch_sum = 0.0;
  std::size_t epoch_steps = 0;
  auto report_epoch = [&] {
    if (epoch_steps) out << "epoch " << current_epoch << " mean loss " << format_real(epoch_sum / static_cast<double>(epoch_steps)) << '\n';
  };
  auto result = train(pairs, std::move(model), c.training, c.threads, [&](const LossRecord& r) {
    if (r.epoch != current_epoch) {
      report_epoch();
      current_epoch = r.epoch;
      epoch_sum = 0.0;
      epoch_steps = 0;
    }
    epoch_sum += r.loss;
    ++epoch_steps;
  });
  report_epoch();
  if (result.unresolved_duplicates) out << "batches with repeated positives: " << result.unresolved_duplicates << '\n';
  save_checkpoint(result.model, ckpt_path);
  write_loss_csv(result.history, loss_path);
  out << "steps: " << result.history.size() << '\n';
  return result;
}

inline std::size_t cmd_encode(const RunConfig& c, std::ostream& out) {
  const auto model = load_checkpoint(require_path(c.paths.checkpoint, "checkpoint"));
  const auto& in_path = require_path(c.paths.encode_input, "encode_input");
  const auto& out_path = require_path(c.paths.encode_output, "encode_output");
  auto in = open_input(in_path);
  std::vector<std::string> sentences;
  std::string line;
  while (std::getline(in, line)) {
    auto s = normalize_text(line);
    if (!s.empty()) sentences.push_back(std::move(s));
  }
  if (in.bad()) throw IoError("read failure: " + in_path.string());
  std::vector<Vector> vectors(sentences.size());
  parallel_for(sentences.size(), c.threads, [&](std::size_t i) { vectors[i] = encode(sentences[i], model); });
  auto file = open_output(out_path);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    file << sentences[i] << '\t';
    for (std::size_t k = 0; k < vectors[i].size(); ++k) file << (k ? " " : "") << format_real(vectors[i][k]);
    file << '\n';
  }
  file.flush();
  if (!file) throw IoError("write failure: " + out_path.string());
  out << "encoded " << sentences.size() << " sentences, dimension " << model.output_dim() << '\n';
  return sentences.size();
}

inline std::vector<EvalResult> cmd_eval(const RunConfig& c, std::ostream& out) {
  const auto model = load_checkpoint(require_path(c.paths.checkpoint, "checkpoint"));
  const auto& results_path = require_path(c.paths.results, "results");
  if (c.tasks.empty()) throw ConfigError("config: eval.tasks is empty");
  std::vector<EvalResult> results;
  for (const auto& spec : c.tasks) {
    const auto task = load_task(spec.name, spec.kind, spec.arity, spec.train, spec.validation, spec.test);
    results.push_back(evaluate(model, task, c.lambda_grid, c.seed, c.probe, c.threads));
    const auto& r = results.back();
    out << r.task << ": " << r.metric << ' ' << format_real(r.value) << " (lambda " << format_real(r.lambda) << ")\n";
  }
  write_results_csv(results, results_path);
  return results;
}

/// Parses argv, runs one subcommand and maps failures to exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"parasent: paraphrase mining and sentence-encoder training"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string input, output;
  auto add_shared = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", seed, "master seed; overrides the config");
    sub->add_option("--threads", threads, "worker threads (0 = all cores); overrides the config");
  };
  auto* mine = app.add_subcommand("mine", "mine paraphrase pairs from a sentence-aligned corpus");
  auto* trn = app.add_subcommand("train", "train the sentence encoder on mined pairs");
  auto* enc = app.add_subcommand("encode", "embed one sentence per line");
  auto* ev = app.add_subcommand("eval", "probe frozen embeddings on the configured tasks");
  for (auto* sub : {mine, trn, enc, ev}) add_shared(sub);
  enc->add_option("--input", input, "sentences, one per line; overrides paths.encode_input");
  enc->add_option("--output", output, "embeddings TSV; overrides paths.encode_output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::ostringstream msg;
    app.exit(e, out, msg);
    err << msg.str();
    return kExitConfig;
  }

  try {
    auto config = load_run_config(config_path);
    if (seed) config.set_seed(*seed);
    if (threads) config.threads = *threads;
    if (!input.empty()) config.paths.encode_input = input;
    if (!output.empty()) config.paths.encode_output = output;
    if (mine->parsed()) cmd_mine(config, out);
    if (trn->parsed()) cmd_train(config, out);
    if (enc->parsed()) cmd_encode(config, out);
    if (ev->parsed()) cmd_eval(config, out);
    return kExitOk;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace parasent
