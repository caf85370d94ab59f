#include "parasent/corpus.hpp"

#include <gtest/gtest.h>

#include "parasent/numeric.hpp"
#include "support/temp_dir.hpp"

using namespace parasent;
using parasent::testing::read_file;
using parasent::testing::TempDir;
using parasent::testing::write_file;

TEST(Normalize, TrimsAndCollapses) {
  EXPECT_EQ(normalize_text("  Hello \t  World\r\n"), "Hello World");
  EXPECT_EQ(normalize_text("\t\t"), "");
  EXPECT_EQ(normalize_text("Keep CASE"), "Keep CASE");
}

TEST(Utf8, Validation) {
  EXPECT_TRUE(is_valid_utf8("zażółć gęślą jaźń"));
  EXPECT_FALSE(is_valid_utf8("\xC0\xAF"));          // overlong
  EXPECT_FALSE(is_valid_utf8("\xED\xA0\x80"));      // surrogate
  EXPECT_FALSE(is_valid_utf8("abc\xE2\x82"));       // truncated
  EXPECT_FALSE(is_valid_utf8("\xF5\x80\x80\x80"));  // > U+10FFFF
}

TEST(ReadParallelTsv, SingleRecordAndEmptyFile) {
  TempDir dir;
  write_file(dir / "one.tsv", "hello\tczesc\n");
  ReadStats stats;
  const auto pairs = read_parallel_tsv(dir / "one.tsv", &stats);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0], (AlignedPair{"hello", "czesc"}));

  write_file(dir / "empty.tsv", "");
  EXPECT_TRUE(read_parallel_tsv(dir / "empty.tsv", &stats).empty());
  EXPECT_EQ(stats.skipped, 0u);
}

TEST(ReadParallelTsv, MalformedLinesAreSkippedAndCounted) {
  TempDir dir;
  write_file(dir / "bad.tsv", "no-tab-here\n");
  ReadStats stats;
  EXPECT_TRUE(read_parallel_tsv(dir / "bad.tsv", &stats).empty());
  EXPECT_EQ(stats.skipped, 1u);

  write_file(dir / "mixed.tsv",
             "a\tb\n"
             "two\ttabs\there\n"
             "  \tempty source\n"
             "bad utf8 \xFF\tx\n"
             "  spaced   out \t target  text \r\n");
  const auto pairs = read_parallel_tsv(dir / "mixed.tsv", &stats);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[1], (AlignedPair{"spaced out", "target text"}));
  EXPECT_EQ(stats.lines, 5u);
  EXPECT_EQ(stats.skipped, 3u);
  EXPECT_EQ(stats.lines, stats.records + stats.skipped);
}

TEST(ReadParallelTsv, MissingFile) {
  EXPECT_THROW(read_parallel_tsv("/nonexistent/parasent/file.tsv"), IoError);
}

TEST(ReadParallelMoses, AlignedFiles) {
  TempDir dir;
  write_file(dir / "src", "one\ntwo\nthree\n");
  write_file(dir / "tgt", "jeden\ndwa\ntrzy\n");
  const auto pairs = read_parallel_moses(dir / "src", dir / "tgt");
  ASSERT_EQ(pairs.size(), 3u);
  EXPECT_EQ(pairs[2], (AlignedPair{"three", "trzy"}));

  write_file(dir / "tgt4", "jeden\ndwa\ntrzy\ncztery\n");
  EXPECT_THROW(read_parallel_moses(dir / "src", dir / "tgt4"), IoError);
}

TEST(ReadParallelMoses, BlankLineSkipsPair) {
  TempDir dir;
  write_file(dir / "src", "one\n\nthree\n");
  write_file(dir / "tgt", "jeden\ndwa\ntrzy\n");
  ReadStats stats;
  auto pairs = read_parallel_moses(dir / "src", dir / "tgt", &stats);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[1].target, "trzy");
  EXPECT_EQ(stats.skipped, 1u);

  write_file(dir / "src2", "one\ntwo\nthree\n");
  write_file(dir / "tgt2", "jeden\n   \ntrzy\n");
  pairs = read_parallel_moses(dir / "src2", dir / "tgt2", &stats);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].source, "one");
  EXPECT_EQ(pairs[1].source, "three");
}

TEST(ReadEvalDataset, Formats) {
  TempDir dir;
  write_file(dir / "cls.tsv", "positive\tgood food\n");
  auto recs = read_eval_dataset(dir / "cls.tsv", TaskKind::classification, TaskArity::single);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].class_name(), "positive");
  EXPECT_EQ(recs[0].sentences, std::vector<std::string>{"good food"});

  write_file(dir / "reg.tsv", "4.5\tA man runs\tA person is running\n");
  recs = read_eval_dataset(dir / "reg.tsv", TaskKind::regression, TaskArity::pair);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].score(), 4.5);
  EXPECT_EQ(recs[0].sentences.size(), 2u);

  write_file(dir / "bad.tsv", "abc\tx\ty\n");
  EXPECT_THROW(read_eval_dataset(dir / "bad.tsv", TaskKind::regression, TaskArity::pair), ConfigError);
  write_file(dir / "partial.tsv", "4.5x\tx\ty\n");
  EXPECT_THROW(read_eval_dataset(dir / "partial.tsv", TaskKind::regression, TaskArity::pair), ConfigError);
  // wrong column count in both directions
  EXPECT_THROW(read_eval_dataset(dir / "reg.tsv", TaskKind::regression, TaskArity::single), ConfigError);
  EXPECT_THROW(read_eval_dataset(dir / "cls.tsv", TaskKind::classification, TaskArity::pair), ConfigError);
}

TEST(WritePairs, RoundTripAndSanitization) {
  TempDir dir;
  write_pairs({}, dir / "empty.tsv");
  EXPECT_EQ(read_file(dir / "empty.tsv"), "");

  write_pairs({{"has\ttab", "plain"}}, dir / "tab.tsv");
  EXPECT_EQ(read_file(dir / "tab.tsv"), "has tab\tplain\n");

  SeededRng rng(17);
  const std::string alphabet = "abcdefghij ąę\t";
  std::vector<ParaphrasePair> pairs;
  auto random_text = [&] {
    std::string s;
    const auto len = 1 + rng.below(20);
    for (std::uint64_t i = 0; i < len; ++i) s += static_cast<char>('a' + rng.below(26));
    if (rng.below(2)) s += " zażółć";
    return s;
  };
  while (pairs.size() < 100) {
    ParaphrasePair p{random_text(), random_text()};
    if (p.a != p.b) pairs.push_back(p);
  }
  write_pairs(pairs, dir / "pairs.tsv");
  EXPECT_EQ(read_pairs(dir / "pairs.tsv"), pairs);

  EXPECT_THROW(write_pairs({{"same", "same"}}, dir / "x.tsv"), std::invalid_argument);
  write_file(dir / "blocker", "x");
  EXPECT_THROW(write_pairs(pairs, dir / "blocker" / "out.tsv"), IoError);
}

// Arbitrary bytes must never produce a record that violates AlignedPair
// invariants, and the line accounting must stay exact.
TEST(ReadParallelTsv, FuzzedInputKeepsInvariants) {
  TempDir dir;
  SeededRng rng(2024);
  const std::string palette = "ab \t\n\r\xC3\xA9\xFF\x80";
  for (int trial = 0; trial < 200; ++trial) {
    std::string blob;
    const auto len = rng.below(300);
    for (std::uint64_t i = 0; i < len; ++i) blob += palette[rng.below(palette.size())];
    write_file(dir / "fuzz.tsv", blob);
    ReadStats stats;
    const auto pairs = read_parallel_tsv(dir / "fuzz.tsv", &stats);
    EXPECT_EQ(stats.lines, stats.records + stats.skipped);
    EXPECT_EQ(stats.records, pairs.size());
    for (const auto& p : pairs) {
      EXPECT_FALSE(p.source.empty());
      EXPECT_FALSE(p.target.empty());
      EXPECT_TRUE(is_valid_utf8(p.source));
      EXPECT_TRUE(is_valid_utf8(p.target));
      EXPECT_EQ(normalize_text(p.source), p.source);
      EXPECT_EQ(p.target.find('\t'), std::string::npos);
    }
  }
}
