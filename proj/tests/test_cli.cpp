#include "parasent/cli.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "support/temp_dir.hpp"

using namespace parasent;
using namespace parasent::testing;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "parasent");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(PARASENT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 12 aligned pairs. Three sources repeat (4, 3 and 2 translations); three
// occur once. With threshold 0 every pair survives the filter, giving
// 2 + 2 + 1 = 5 paraphrase pairs.
const char* kFixtureCorpus =
    "the old man walks to the market\tan old man is walking to the market\n"
    "it is raining in the city\tthe city is rainy today\n"
    "the old man walks to the market\tthe elderly man goes to the market\n"
    "she bought fresh bread\tshe purchased fresh bread\n"
    "the old man walks to the market\tan aged man walks to the bazaar\n"
    "the children play outside\tchildren are playing outdoors\n"
    "it is raining in the city\train is falling on the city\n"
    "the old man walks to the market\tthe old man heads to the market\n"
    "we watched a long film\twe saw a long movie\n"
    "she bought fresh bread\tshe got some fresh bread\n"
    "it is raining in the city\tit rains in town\n"
    "the train arrives at noon\tthe train comes at midday\n";

class CliFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    write_file(dir / "corpus.tsv", kFixtureCorpus);
    write_file(dir / "sentences.txt",
               "the old man walks\nshe bought bread\n\n  it is   raining \nchildren play\nan unseen sentence\n");
    write_file(dir / "cls_train.tsv", "old\tthe old man\nold\tan aged man\nrain\tit is raining\nrain\train is falling\n"
                                      "old\tthe elderly man\nrain\tit rains in town\n");
    write_file(dir / "cls_val.tsv", "old\tan old man\nrain\tthe city is rainy\n");
    write_file(dir / "cls_test.tsv", "old\tthe old man heads\nrain\train in the city\n");
    write_file(dir / "rel.tsv", "4.5\tthe old man\tan old man\n1.0\tthe old man\tit rains\n3.0\tfresh bread\tsome bread\n"
                                "0.5\ta long film\tthe city\n2.0\tthe market\tthe bazaar\n");
    write_config(base_config());
  }

  Json base_config() const {
    return Json{{"seed", 7},
                {"threads", 1},
                {"paths",
                 {{"corpus", "corpus.tsv"},
                  {"pairs", "out/pairs.tsv"},
                  {"checkpoint", "out/model.json"},
                  {"loss_csv", "out/loss.csv"},
                  {"results", "out/results.csv"},
                  {"encode_input", "sentences.txt"},
                  {"encode_output", "out/embeddings.tsv"}}},
                {"mining", {{"threshold", 0.0}}},
                {"encoder", {{"embed_dim", 8}, {"ffn_dim", 16}, {"lstm_hidden", 12}, {"max_len", 12}}},
                {"training", {{"batch_size", 2}, {"epochs", 3}, {"peak_lr", 1e-2}}},
                {"eval",
                 {{"iterations", 30},
                  {"hidden", 8},
                  {"tasks",
                   {{{"name", "topic"}, {"kind", "classification"}, {"arity", "single"}, {"train", "cls_train.tsv"},
                     {"validation", "cls_val.tsv"}, {"test", "cls_test.tsv"}},
                    {{"name", "related"}, {"kind", "regression"}, {"arity", "pair"}, {"train", "rel.tsv"},
                     {"validation", "rel.tsv"}, {"test", "rel.tsv"}}}}}}};
  }

  void write_config(const Json& j) { write_file(config, j.dump(2)); }

  CliRun cmd(const std::string& name, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{name, "--config", config.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }

  std::size_t line_count(const std::string& name) const {
    const auto text = read_file(dir / name);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
  }

  TempDir dir;
  std::filesystem::path config = dir / "run.json";
};

}  // namespace

TEST_F(CliFixture, MineSummaryMatchesHandCount) {
  const auto r = cmd("mine");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("input pairs: 12\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("filtered survivors: 12\n"), std::string::npos);
  EXPECT_NE(r.out.find("groups: 6\n"), std::string::npos);
  EXPECT_NE(r.out.find("groups >= 2: 3\n"), std::string::npos);
  EXPECT_NE(r.out.find("emitted pairs: 5\n"), std::string::npos);
  EXPECT_EQ(line_count("out/pairs.tsv"), 5u);
}

TEST_F(CliFixture, MineThresholdAboveOneEmitsNothing) {
  auto j = base_config();
  j["mining"]["threshold"] = 1.01;
  write_config(j);
  const auto r = cmd("mine");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("emitted pairs: 0\n"), std::string::npos);
  EXPECT_EQ(read_file(dir / "out/pairs.tsv"), "");
}

TEST_F(CliFixture, MineMissingCorpusIsIoError) {
  auto j = base_config();
  j["paths"]["corpus"] = "nowhere.tsv";
  write_config(j);
  const auto r = cmd("mine");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nowhere.tsv"), std::string::npos) << r.err;
}

TEST_F(CliFixture, MineMosesInputAndSeedOverride) {
  std::string src, tgt;
  std::istringstream in(kFixtureCorpus);
  for (std::string line; std::getline(in, line);) {
    const auto tab = line.find('\t');
    src += line.substr(0, tab) + '\n';
    tgt += line.substr(tab + 1) + '\n';
  }
  write_file(dir / "c.src", src);
  write_file(dir / "c.tgt", tgt);
  ASSERT_EQ(cmd("mine").code, 0);
  const auto tsv_pairs = read_file(dir / "out/pairs.tsv");

  auto j = base_config();
  j["paths"].erase("corpus");
  j["paths"]["corpus_source"] = "c.src";
  j["paths"]["corpus_target"] = "c.tgt";
  write_config(j);
  ASSERT_EQ(cmd("mine").code, 0);
  EXPECT_EQ(read_file(dir / "out/pairs.tsv"), tsv_pairs);

  bool changed = false;
  for (int s = 0; s < 5 && !changed; ++s) {
    ASSERT_EQ(cmd("mine", {"--seed", std::to_string(100 + s)}).code, 0);
    changed = read_file(dir / "out/pairs.tsv") != tsv_pairs;
  }
  EXPECT_TRUE(changed);
}

TEST_F(CliFixture, ConfigErrorsExitTwo) {
  auto j = base_config();
  j["training"]["batchsize"] = 4;
  write_config(j);
  auto r = cmd("train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("batchsize"), std::string::npos) << r.err;

  j = base_config();
  j["paths"].erase("pairs");
  write_config(j);
  r = cmd("mine");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("paths.pairs"), std::string::npos);

  write_file(config, "{ not json");
  EXPECT_EQ(cmd("mine").code, 2);

  EXPECT_EQ(run({"mine"}).code, 2);  // --config is mandatory
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"dance", "--config", config.string()}).code, 2);
}

TEST_F(CliFixture, TrainWritesCheckpointAndLossRows) {
  ASSERT_EQ(cmd("mine").code, 0);
  const auto r = cmd("train");
  ASSERT_EQ(r.code, 0) << r.err;
  // 5 pairs with K = 2: two batches per epoch (the lone fifth pair is dropped).
  EXPECT_EQ(batches_per_epoch(5, 2), 2u);
  EXPECT_EQ(line_count("out/loss.csv"), 1u + 3u * 2u);
  const auto first = read_file(dir / "out/loss.csv");
  ASSERT_EQ(cmd("train").code, 0);
  EXPECT_EQ(read_file(dir / "out/loss.csv"), first);
  const auto ckpt = read_file(dir / "out/model.json");
  ASSERT_EQ(cmd("train", {"--threads", "4"}).code, 0);
  EXPECT_EQ(read_file(dir / "out/loss.csv"), first);
  EXPECT_EQ(read_file(dir / "out/model.json"), ckpt);
}

TEST_F(CliFixture, TrainZeroEpochsSavesInitialization) {
  ASSERT_EQ(cmd("mine").code, 0);
  auto j = base_config();
  j["training"]["epochs"] = 0;
  write_config(j);
  ASSERT_EQ(cmd("train").code, 0);
  const auto cfg = load_run_config(config);
  const auto init = initial_model(cfg, read_pairs(dir / "out/pairs.tsv"));
  const auto saved = load_checkpoint(dir / "out/model.json");
  EXPECT_TRUE(saved.params == init.params);
  EXPECT_EQ(read_file(dir / "out/loss.csv"), "step,epoch,lr,loss\n");
}

TEST_F(CliFixture, TrainDivergenceExitsThree) {
  ASSERT_EQ(cmd("mine").code, 0);
  auto j = base_config();
  j["training"]["peak_lr"] = 1e300;
  j["training"]["warmup_ratio"] = 0.0;
  j["training"]["epochs"] = 20;
  write_config(j);
  const auto r = cmd("train");
  EXPECT_EQ(r.code, 3) << r.out << r.err;
}

TEST_F(CliFixture, TrainMissingPairsIsIoError) { EXPECT_EQ(cmd("train").code, 1); }

TEST_F(CliFixture, EncodeOneLinePerSentence) {
  ASSERT_EQ(cmd("mine").code, 0);
  ASSERT_EQ(cmd("train").code, 0);
  auto r = cmd("encode");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = read_file(dir / "out/embeddings.tsv");
  std::istringstream in(text);
  std::vector<std::string> sentences;
  std::vector<std::size_t> dims;
  for (std::string line; std::getline(in, line);) {
    const auto fields = split_tabs(line);
    ASSERT_EQ(fields.size(), 2u);
    sentences.emplace_back(fields[0]);
    std::istringstream vals{std::string(fields[1])};
    std::size_t n = 0;
    for (double v; vals >> v;) ++n;
    dims.push_back(n);
  }
  ASSERT_EQ(sentences.size(), 5u);  // the blank line is ignored
  EXPECT_EQ(sentences[2], "it is raining");
  for (auto d : dims) EXPECT_EQ(d, 12u);

  // Re-encode the emitted sentences through the flag overrides.
  std::string again;
  for (const auto& s : sentences) again += s + '\n';
  write_file(dir / "again.txt", again);
  r = cmd("encode", {"--input", (dir / "again.txt").string(), "--output", (dir / "again.tsv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(dir / "again.tsv"), text);
}

TEST_F(CliFixture, EncodeWithoutCheckpointIsIoError) { EXPECT_EQ(cmd("encode").code, 1); }

TEST_F(CliFixture, EvalRowsFollowTaskOrder) {
  ASSERT_EQ(cmd("mine").code, 0);
  ASSERT_EQ(cmd("train").code, 0);
  auto r = cmd("eval");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = read_file(dir / "out/results.csv");
  std::istringstream in(text);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"task", "metric", "value", "lambda"}));
  EXPECT_EQ(rows[1][0], "topic");
  EXPECT_EQ(rows[1][1], "accuracy");
  EXPECT_EQ(rows[2][0], "related");
  EXPECT_EQ(rows[2][1], "spearman");

  ASSERT_EQ(cmd("eval", {"--threads", "3"}).code, 0);
  EXPECT_EQ(read_file(dir / "out/results.csv"), text);

  auto j = base_config();
  j["eval"]["tasks"].erase(1);
  write_config(j);
  ASSERT_EQ(cmd("eval").code, 0);
  EXPECT_EQ(line_count("out/results.csv"), 2u);
}

TEST_F(CliFixture, EvalTaskErrors) {
  ASSERT_EQ(cmd("mine").code, 0);
  ASSERT_EQ(cmd("train").code, 0);
  auto j = base_config();
  j["eval"]["tasks"][0]["test"] = "missing.tsv";
  write_config(j);
  EXPECT_EQ(cmd("eval").code, 1);

  write_file(dir / "bad.tsv", "old\tthe old man\tsurplus column\n");
  j = base_config();
  j["eval"]["tasks"][0]["test"] = "bad.tsv";
  write_config(j);
  EXPECT_EQ(cmd("eval").code, 2);

  j = base_config();
  j["eval"]["tasks"][0]["kind"] = "ranking";
  write_config(j);
  EXPECT_EQ(cmd("eval").code, 2);
}

TEST_F(CliFixture, BinaryExitCodes) {
  const std::string cfg = " --config " + config.string();
  EXPECT_EQ(run_binary("mine" + cfg), 0);
  EXPECT_EQ(run_binary("encode" + cfg), 1);
  EXPECT_EQ(run_binary("train" + cfg + " --threads many"), 2);
  EXPECT_EQ(run_binary("--help"), 0);
}

TEST(RunConfig, DefaultsAndPathResolution) {
  const auto c = parse_run_config(Json::object(), "/base");
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.training.batch_size, 64u);
  EXPECT_EQ(c.training.epochs, 3u);
  EXPECT_EQ(c.training.warmup_ratio, 0.1);
  EXPECT_EQ(c.mining.threshold, 0.7);
  EXPECT_EQ(c.encoder, EncoderConfig{});
  EXPECT_EQ(c.lambda_grid, default_lambda_grid());
  EXPECT_EQ(c.probe.hidden, 64u);
  EXPECT_EQ(c.probe.iterations, 200u);

  const auto d = parse_run_config(Json{{"seed", 9}, {"paths", {{"pairs", "x/p.tsv"}, {"checkpoint", "/abs/m.json"}}}}, "/base");
  EXPECT_EQ(*d.paths.pairs, std::filesystem::path("/base/x/p.tsv"));
  EXPECT_EQ(*d.paths.checkpoint, std::filesystem::path("/abs/m.json"));
  EXPECT_EQ(d.mining.seed, 9u);
  EXPECT_EQ(d.training.seed, 9u);

  EXPECT_THROW(parse_run_config(Json{{"paths", {{"corpus", "a"}, {"corpus_source", "b"}, {"corpus_target", "c"}}}}, "/"),
               ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"paths", {{"corpus_source", "b"}}}}, "/"), ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"mining", {{"threshold", -0.1}}}}, "/"), ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"mining", {{"filter", "precomputed"}}}}, "/"), ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"training", {{"batch_size", 0}}}}, "/"), ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"eval", {{"lambda_grid", Json::array()}}}}, "/"), ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"seed", -1}}, "/"), ConfigError);
  EXPECT_THROW(parse_run_config(Json{{"sed", 1}}, "/"), ConfigError);
}
