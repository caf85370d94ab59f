#pragma once

// Paraphrase mining from a bilingual corpus:
//   1. keep aligned pairs whose cross-lingual cosine similarity reaches the
//      threshold,
//   2. group target sentences by their (exact, normalized) source sentence,
//   3. in every group of >= 2 targets, pick pairs so that each target occurs
//      at least once.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "parasent/corpus.hpp"
#include "parasent/errors.hpp"
#include "parasent/numeric.hpp"

namespace parasent {

/// Sentence -> fixed-dimension vector, used only to score aligned pairs.
class FilterEncoder {
 public:
  virtual ~FilterEncoder() = default;
  virtual std::size_t dimension() const = 0;
  virtual Vector encode(std::string_view text) const = 0;
};

/// Splits UTF-8 text into code points; stray bytes of invalid sequences
/// become single-byte units.
inline std::vector<std::string_view> utf8_units(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c & 0xE0) == 0xC0 ? 2 : (c & 0xF0) == 0xE0 ? 3 : (c & 0xF8) == 0xF0 ? 4 : 1;
    if (i + len > s.size() || !is_valid_utf8(s.substr(i, len))) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

/// L2-normalized counts of character trigrams hashed (FNV-1a) into a fixed
/// number of buckets. ASCII letters are lowercased; the text is padded with
/// one start and one end marker.
class HashedNgramEncoder final : public FilterEncoder {
 public:
  static constexpr std::string_view kBegin = "\x02";
  static constexpr std::string_view kEnd = "\x03";

  explicit HashedNgramEncoder(std::size_t dimension) : dim_(dimension) {
    if (dimension < 16) throw std::invalid_argument("hashed n-gram encoder: dimension must be >= 16");
  }

  std::size_t dimension() const override { return dim_; }

  /// Bucket index of every trigram of `text`, in order.
  std::vector<std::size_t> buckets(std::string_view text) const {
    std::string lowered(text);
    for (auto& ch : lowered)
      if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    std::vector<std::string_view> units{kBegin};
    for (auto u : utf8_units(lowered)) units.push_back(u);
    units.push_back(kEnd);
    std::vector<std::size_t> out;
    if (lowered.empty()) return out;
    std::string gram;
    for (std::size_t i = 0; i + 2 < units.size(); ++i) {
      gram.assign(units[i]);
      gram.append(units[i + 1]);
      gram.append(units[i + 2]);
      out.push_back(static_cast<std::size_t>(fnv1a64(gram) % dim_));
    }
    return out;
  }

  Vector encode(std::string_view text) const override {
    Vector v(dim_, 0.0);
    for (auto b : buckets(text)) v[b] += 1.0;
    const double n = l2_norm(v);
    if (n > 0.0)
      for (auto& x : v) x /= n;
    return v;
  }

 private:
  std::size_t dim_;
};

/// Exact-lookup encoder over a `sentence<TAB>v1 v2 ... vD` file, e.g. the
/// output of `parasent encode` or embeddings computed by an external model.
class PrecomputedEncoder final : public FilterEncoder {
 public:
  explicit PrecomputedEncoder(const std::filesystem::path& path) {
    auto in = open_input(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (normalize_text(line).empty()) continue;
      const auto fields = split_tabs(line);
      auto where = [&] { return path.string() + ":" + std::to_string(lineno); };
      if (fields.size() != 2) throw ConfigError(where() + ": expected sentence<TAB>vector");
      Vector v;
      std::istringstream values{std::string(fields[1])};
      std::string tok;
      while (values >> tok) {
        std::size_t used = 0;
        double x = 0.0;
        try {
          x = std::stod(tok, &used);
        } catch (const std::exception&) {
          throw ConfigError(where() + ": bad number '" + tok + "'");
        }
        if (used != tok.size() || !std::isfinite(x)) throw ConfigError(where() + ": bad number '" + tok + "'");
        v.push_back(x);
      }
      if (v.empty()) throw ConfigError(where() + ": empty vector");
      if (dim_ == 0) dim_ = v.size();
      if (v.size() != dim_) {
        throw ConfigError(where() + ": dimension " + std::to_string(v.size()) + " != " + std::to_string(dim_));
      }
      table_.try_emplace(normalize_text(fields[0]), std::move(v));
    }
    if (dim_ == 0) throw ConfigError(path.string() + ": no embeddings");
  }

  std::size_t dimension() const override { return dim_; }
  std::size_t size() const { return table_.size(); }

  Vector encode(std::string_view text) const override {
    const auto it = table_.find(normalize_text(text));
    if (it == table_.end()) throw std::out_of_range("no precomputed embedding for '" + std::string(text) + "'");
    return it->second;
  }

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, Vector> table_;
};

struct MiningConfig {
  double threshold = 0.7;
  std::uint64_t seed = 0;
  std::size_t min_group_size = 2;

  // Values above 1 are accepted and simply reject every pair.
  void validate() const {
    if (!std::isfinite(threshold) || threshold < 0.0) {
      throw ConfigError("mining threshold must be a finite number >= 0");
    }
  }
};

struct FilterStats {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t failed = 0;  // encoder errors or zero-norm vectors
};

/// Keeps pairs with cos(enc(source), enc(target)) >= threshold, in input
/// order. Pairs the encoder cannot handle are dropped and tallied.
inline std::vector<AlignedPair> filter_pairs(const std::vector<AlignedPair>& pairs, const FilterEncoder& enc,
                                             double threshold, unsigned threads = 1,
                                             FilterStats* stats = nullptr) {
  enum : std::uint8_t { drop, keep, fail };
  std::vector<std::uint8_t> verdict(pairs.size(), drop);
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    try {
      const auto s = enc.encode(pairs[i].source);
      const auto t = enc.encode(pairs[i].target);
      verdict[i] = cosine_similarity(s, t) >= threshold ? keep : drop;
    } catch (const std::exception&) {
      verdict[i] = fail;
    }
  });
  std::vector<AlignedPair> out;
  FilterStats local;
  local.input = pairs.size();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (verdict[i] == keep) out.push_back(pairs[i]);
    if (verdict[i] == fail) ++local.failed;
  }
  local.kept = out.size();
  if (stats) {
    stats->input += local.input;
    stats->kept += local.kept;
    stats->failed += local.failed;
  }
  return out;
}

struct SentenceGroup {
  std::string source;
  std::vector<std::string> targets;  // distinct, first-seen order
};

/// Incremental grouping by exact source string. Groups and their targets
/// keep first-seen order.
class SourceGrouper {
 public:
  void add(const AlignedPair& p) {
    auto [it, inserted] = index_.try_emplace(p.source, groups_.size());
    if (inserted) {
      groups_.push_back({p.source, {}});
      seen_.emplace_back();
    }
    const std::size_t g = it->second;
    if (seen_[g].insert(p.target).second) groups_[g].targets.push_back(p.target);
  }

  std::vector<SentenceGroup> release() {
    index_.clear();
    seen_.clear();
    return std::move(groups_);
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::unordered_set<std::string>> seen_;
  std::vector<SentenceGroup> groups_;
};

inline std::vector<SentenceGroup> group_by_source(const std::vector<AlignedPair>& pairs) {
  SourceGrouper grouper;
  for (const auto& p : pairs) grouper.add(p);
  return grouper.release();
}

/// Shuffles the targets and pairs neighbours (t1,t2), (t3,t4), ...; with an
/// odd count the last target is paired with a uniformly chosen earlier one.
/// Yields ceil(n/2) pairs for n >= 2, nothing otherwise.
inline std::vector<ParaphrasePair> generate_pairs(const SentenceGroup& group, SeededRng& rng) {
  const std::size_t n = group.targets.size();
  if (n < 2) return {};
  auto order = shuffle(group.targets, rng);
  std::vector<ParaphrasePair> out;
  out.reserve((n + 1) / 2);
  for (std::size_t i = 0; i + 1 < n; i += 2) out.push_back({order[i], order[i + 1]});
  if (n % 2 == 1) {
    const auto partner = static_cast<std::size_t>(rng.below(n - 1));
    out.push_back({order[n - 1], order[partner]});
  }
  return out;
}

struct MiningStats {
  std::size_t input_pairs = 0;
  std::size_t skipped_lines = 0;
  std::size_t filtered_survivors = 0;
  std::size_t encoder_failures = 0;
  std::size_t groups = 0;
  std::size_t groups_ge2 = 0;
  std::size_t emitted_pairs = 0;
  std::size_t duplicate_pairs = 0;
};

struct MiningResult {
  std::vector<ParaphrasePair> pairs;
  MiningStats stats;
};

/// Adapter giving a vector the reader interface.
class VectorSource {
 public:
  explicit VectorSource(const std::vector<AlignedPair>& pairs) : pairs_(&pairs) {}
  std::optional<AlignedPair> next() {
    if (pos_ >= pairs_->size()) return std::nullopt;
    return (*pairs_)[pos_++];
  }
  ReadStats stats() const { return {pos_, pos_, 0}; }

 private:
  const std::vector<AlignedPair>* pairs_;
  std::size_t pos_ = 0;
};

/// filter -> group -> generate over a streaming source. Each group draws from
/// its own sub-stream (master seed, group index), and the final list is
/// deduplicated on unordered pair identity keeping first occurrences.
template <typename Source>
MiningResult mine_stream(Source& source, const FilterEncoder& enc, const MiningConfig& config, unsigned threads = 1,
                         std::size_t chunk_size = 4096) {
  config.validate();
  MiningResult result;
  FilterStats fstats;
  SourceGrouper grouper;
  std::vector<AlignedPair> chunk;
  chunk.reserve(chunk_size);
  auto flush = [&] {
    for (const auto& p : filter_pairs(chunk, enc, config.threshold, threads, &fstats)) grouper.add(p);
    chunk.clear();
  };
  while (auto p = source.next()) {
    chunk.push_back(std::move(*p));
    if (chunk.size() >= chunk_size) flush();
  }
  flush();

  const auto groups = grouper.release();
  const SeededRng base = SeededRng(config.seed).split("mining");
  std::vector<std::vector<ParaphrasePair>> per_group(groups.size());
  parallel_for(groups.size(), threads, [&](std::size_t g) {
    if (groups[g].targets.size() < config.min_group_size) return;
    auto rng = base.derive(g);
    per_group[g] = generate_pairs(groups[g], rng);
  });

  std::unordered_set<std::string> seen;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].targets.size() >= config.min_group_size) ++result.stats.groups_ge2;
    for (auto& pair : per_group[g]) {
      const bool ordered = pair.a < pair.b;
      std::string key = ordered ? pair.a + '\t' + pair.b : pair.b + '\t' + pair.a;
      if (!seen.insert(std::move(key)).second) {
        ++result.stats.duplicate_pairs;
        continue;
      }
      result.pairs.push_back(std::move(pair));
    }
  }
  const auto rstats = source.stats();
  result.stats.input_pairs = fstats.input;
  result.stats.skipped_lines = rstats.skipped;
  result.stats.filtered_survivors = fstats.kept;
  result.stats.encoder_failures = fstats.failed;
  result.stats.groups = groups.size();
  result.stats.emitted_pairs = result.pairs.size();
  return result;
}

inline MiningResult mine(const std::vector<AlignedPair>& corpus, const FilterEncoder& enc, const MiningConfig& config,
                         unsigned threads = 1) {
  VectorSource source(corpus);
  return mine_stream(source, enc, config, threads);
}

}  // namespace parasent
