#pragma once

// Ingestion of sentence-aligned corpora and evaluation datasets, and the
// mined-pairs writer. All text passes through normalize_text: surrounding
// whitespace trimmed, internal whitespace runs collapsed to one space, case
// preserved.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "parasent/errors.hpp"

namespace parasent {

struct AlignedPair {
  std::string source;
  std::string target;
  friend bool operator==(const AlignedPair&, const AlignedPair&) = default;
};

struct ParaphrasePair {
  std::string a;
  std::string b;
  friend bool operator==(const ParaphrasePair&, const ParaphrasePair&) = default;
};

enum class TaskKind { classification, regression };
enum class TaskArity { single, pair };

struct EvalRecord {
  std::variant<std::string, double> label;
  std::vector<std::string> sentences;

  bool is_classification() const { return std::holds_alternative<std::string>(label); }
  const std::string& class_name() const { return std::get<std::string>(label); }
  double score() const { return std::get<double>(label); }
};

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    if (is_space(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(ch);
  }
  return out;
}

/// Strict UTF-8 check: rejects overlong forms, surrogates and code points
/// above U+10FFFF.
inline bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  const std::size_t n = s.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

/// Creates missing parent directories.
inline std::ofstream open_output(const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

/// Counters shared by the corpus readers. lines == records + skipped.
struct ReadStats {
  std::size_t lines = 0;
  std::size_t records = 0;
  std::size_t skipped = 0;
};

namespace detail {
inline std::optional<AlignedPair> make_pair(std::string_view source, std::string_view target) {
  if (!is_valid_utf8(source) || !is_valid_utf8(target)) return std::nullopt;
  AlignedPair p{normalize_text(source), normalize_text(target)};
  if (p.source.empty() || p.target.empty()) return std::nullopt;
  return p;
}
}  // namespace detail

/// Forward-only reader over a `source<TAB>target` file. Malformed lines are
/// skipped and tallied.
class ParallelTsvReader {
 public:
  explicit ParallelTsvReader(const std::filesystem::path& path) : in_(open_input(path)) {}

  std::optional<AlignedPair> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++stats_.lines;
      const auto fields = split_tabs(line);
      if (fields.size() == 2) {
        if (auto p = detail::make_pair(fields[0], fields[1])) {
          ++stats_.records;
          return p;
        }
      }
      ++stats_.skipped;
    }
    if (in_.bad()) throw IoError("read failure");
    return std::nullopt;
  }

  const ReadStats& stats() const { return stats_; }

 private:
  std::ifstream in_;
  ReadStats stats_;
};

/// Forward-only reader over two line-aligned files. A line-count mismatch is
/// detected when the shorter file runs out and raised as an IoError.
class MosesReader {
 public:
  MosesReader(const std::filesystem::path& source, const std::filesystem::path& target)
      : src_(open_input(source)), tgt_(open_input(target)) {}

  std::optional<AlignedPair> next() {
    std::string s;
    std::string t;
    while (true) {
      const bool got_s = static_cast<bool>(std::getline(src_, s));
      const bool got_t = static_cast<bool>(std::getline(tgt_, t));
      if (!got_s && !got_t) return std::nullopt;
      if (got_s != got_t) {
        throw IoError("aligned files differ in line count (after " + std::to_string(stats_.lines) +
                      " lines)");
      }
      ++stats_.lines;
      if (auto p = detail::make_pair(s, t)) {
        ++stats_.records;
        return p;
      }
      ++stats_.skipped;
    }
  }

  const ReadStats& stats() const { return stats_; }

 private:
  std::ifstream src_;
  std::ifstream tgt_;
  ReadStats stats_;
};

template <typename Reader>
std::vector<AlignedPair> drain(Reader& reader) {
  std::vector<AlignedPair> out;
  while (auto p = reader.next()) out.push_back(std::move(*p));
  return out;
}

inline std::vector<AlignedPair> read_parallel_tsv(const std::filesystem::path& path, ReadStats* stats = nullptr) {
  ParallelTsvReader reader(path);
  auto out = drain(reader);
  if (stats) *stats = reader.stats();
  return out;
}

inline std::vector<AlignedPair> read_parallel_moses(const std::filesystem::path& source,
                                                    const std::filesystem::path& target,
                                                    ReadStats* stats = nullptr) {
  MosesReader reader(source, target);
  auto out = drain(reader);
  if (stats) *stats = reader.stats();
  return out;
}

/// Reads `label<TAB>sentence[<TAB>sentence2]`. Blank lines are ignored; any
/// other malformed line is a ConfigError naming the line number.
inline std::vector<EvalRecord> read_eval_dataset(const std::filesystem::path& path, TaskKind kind,
                                                 TaskArity arity) {
  auto in = open_input(path);
  const std::size_t expected = arity == TaskArity::single ? 2 : 3;
  std::vector<EvalRecord> out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_text(line).empty()) continue;
    if (!is_valid_utf8(line)) fail("invalid UTF-8");
    const auto fields = split_tabs(line);
    if (fields.size() != expected) {
      fail("expected " + std::to_string(expected) + " columns, got " + std::to_string(fields.size()));
    }
    EvalRecord rec;
    const std::string label = normalize_text(fields[0]);
    if (label.empty()) fail("empty label");
    if (kind == TaskKind::classification) {
      rec.label = label;
    } else {
      std::size_t used = 0;
      double score = 0.0;
      try {
        score = std::stod(label, &used);
      } catch (const std::exception&) {
        fail("non-numeric score '" + label + "'");
      }
      if (used != label.size() || !std::isfinite(score)) fail("non-numeric score '" + label + "'");
      rec.label = score;
    }
    for (std::size_t k = 1; k < fields.size(); ++k) {
      auto s = normalize_text(fields[k]);
      if (s.empty()) fail("empty sentence in column " + std::to_string(k + 1));
      rec.sentences.push_back(std::move(s));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Normalized form that read_parallel_tsv would produce for `text`; embedded
/// tabs and newlines become spaces.
inline std::string sanitize_field(std::string_view text) { return normalize_text(text); }

inline void write_pairs(const std::vector<ParaphrasePair>& pairs, const std::filesystem::path& path) {
  auto out = open_output(path);
  for (const auto& p : pairs) {
    const auto a = sanitize_field(p.a);
    const auto b = sanitize_field(p.b);
    if (a.empty() || b.empty()) throw std::invalid_argument("write_pairs: empty sentence");
    if (a == b) throw std::invalid_argument("write_pairs: self-pair '" + a + "'");
    out << a << '\t' << b << '\n';
  }
  out.flush();
  if (!out) throw IoError("write failure: " + path.string());
}

inline std::vector<ParaphrasePair> read_pairs(const std::filesystem::path& path, ReadStats* stats = nullptr) {
  ReadStats local;
  std::vector<ParaphrasePair> out;
  for (auto& p : read_parallel_tsv(path, &local)) {
    if (p.source == p.target) {
      --local.records;
      ++local.skipped;
      continue;
    }
    out.push_back({std::move(p.source), std::move(p.target)});
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace parasent
