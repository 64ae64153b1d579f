#pragma once

// Query augmentation: locally cropped sentence queries, ingestion of a
// generated-query pool, balanced assignment of queries to retrieval sources,
// and the kind-stratified train/validation split.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/rng.hpp"
#include "distilrank/tokenize.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

struct CropConfig {
  std::size_t n = 10000;
  std::size_t min_tokens = 5;
  std::size_t max_tokens = 40;
  std::uint64_t seed = 0;
  TokenizerConfig tokenizer;
};

struct CropResult {
  std::vector<Query> queries;
  std::size_t eligible = 0;
  // Set when fewer eligible sentences than n existed and sampling fell back
  // to drawing with replacement.
  bool with_replacement = false;
};

// Splits on '.', '!' or '?' followed by whitespace or end of text. Sentences
// keep their terminator and are trimmed.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  auto emit = [&](std::size_t begin, std::size_t end) {
    while (begin < end && is_space(text[begin])) ++begin;
    while (end > begin && is_space(text[end - 1])) --end;
    if (end > begin) out.emplace_back(text.substr(begin, end - begin));
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || is_space(text[i + 1]))) {
      emit(start, i + 1);
      start = i + 1;
    }
  }
  emit(start, text.size());
  return out;
}

inline CropResult crop_sentences(const std::vector<Document>& corpus, const CropConfig& config) {
  if (config.min_tokens < 1 || config.min_tokens > config.max_tokens) {
    throw UsageError("crop bounds must satisfy 1 <= min_tokens <= max_tokens");
  }
  CropResult result;
  if (config.n == 0) return result;
  std::vector<std::string> candidates;
  for (const auto& doc : corpus) {
    for (auto& s : split_sentences(doc.text)) {
      const auto len = tokenize(s, config.tokenizer).size();
      if (len >= config.min_tokens && len <= config.max_tokens) candidates.push_back(std::move(s));
    }
  }
  result.eligible = candidates.size();
  if (candidates.empty()) {
    throw DataError("no sentence of " + std::to_string(config.min_tokens) + ".." + std::to_string(config.max_tokens) +
                    " tokens in the corpus; cannot crop " + std::to_string(config.n) + " queries");
  }
  Rng rng(config.seed);
  std::vector<std::size_t> picks;
  if (candidates.size() >= config.n) {
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first n slots are a uniform sample.
    for (std::size_t i = 0; i < config.n; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
    picks.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(config.n));
  } else {
    result.with_replacement = true;
    for (std::size_t i = 0; i < config.n; ++i) picks.push_back(rng.below(candidates.size()));
  }
  for (std::size_t i = 0; i < picks.size(); ++i) {
    result.queries.push_back({"crop-" + std::to_string(i + 1), candidates[picks[i]], QueryKind::Cropped});
  }
  return result;
}

struct GeneratedQuery {
  std::string doc_id;
  std::string text;
};

inline std::vector<GeneratedQuery> read_generated_pool(std::istream& in) {
  std::vector<GeneratedQuery> pool;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 2 || cols[0].empty()) {
      throw DataError(detail::at_line(lineno, "expected doc_id<TAB>query_text"));
    }
    pool.push_back({std::string(cols[0]), std::string(cols[1])});
  }
  return pool;
}

// Samples n generated queries uniformly without replacement; ids are gen-<i>
// in sampled order.
inline std::vector<Query> sample_generated(const std::vector<GeneratedQuery>& pool, std::size_t n,
                                           std::uint64_t seed) {
  if (n > pool.size()) {
    throw DataError("requested " + std::to_string(n) + " generated queries but the pool holds only " +
                    std::to_string(pool.size()));
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span(order));
  std::vector<Query> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"gen-" + std::to_string(i + 1), pool[order[i]].text, QueryKind::Generated});
  }
  return out;
}

inline std::vector<Query> load_generated(const std::string& path, std::size_t n = 10000, std::uint64_t seed = 0) {
  auto in = detail::open_input(path);
  std::vector<GeneratedQuery> pool;
  try {
    pool = read_generated_pool(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
  return sample_generated(pool, n, seed);
}

// query_id -> source.
using SourceAssignment = std::map<std::string, Source>;

// Within each kind, a seeded shuffle is dealt round-robin over the four
// sources, so per-kind group sizes differ by at most one.
inline SourceAssignment assign_sources(const std::vector<Query>& queries, std::uint64_t seed) {
  SourceAssignment out;
  for (QueryKind kind : {QueryKind::Cropped, QueryKind::Generated}) {
    std::vector<const Query*> group;
    for (const auto& q : queries) {
      if (q.kind == kind) group.push_back(&q);
    }
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
    rng.shuffle(std::span(group));
    for (std::size_t i = 0; i < group.size(); ++i) out[group[i]->query_id] = kAllSources[i % 4];
  }
  return out;
}

inline void write_assignment(std::ostream& out, const SourceAssignment& assignment) {
  for (const auto& [qid, src] : assignment) out << qid << '\t' << to_string(src) << '\n';
}

inline SourceAssignment read_assignment(std::istream& in) {
  SourceAssignment out;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto cols = detail::split_tabs(line);
    const auto src = cols.size() == 2 ? parse_source(cols[1]) : std::nullopt;
    if (!src) throw DataError(detail::at_line(lineno, "expected query_id<TAB>(bm25|splade|dragon|monot5)"));
    if (!out.emplace(std::string(cols[0]), *src).second) {
      throw DataError(detail::at_line(lineno, "duplicate query_id " + std::string(cols[0])));
    }
  }
  return out;
}

struct Split {
  std::vector<DistilledExample> train;
  std::vector<DistilledExample> validation;
};

// Reserves n_val / 2 examples of each query kind for validation; both halves
// keep input order.
inline Split split_dataset(const std::vector<DistilledExample>& examples, std::size_t n_val, std::uint64_t seed) {
  if (n_val % 2 != 0) throw UsageError("n_val must be even (half per query kind), got " + std::to_string(n_val));
  const std::size_t per_kind = n_val / 2;
  std::set<std::string> ids;
  for (const auto& ex : examples) {
    if (!ids.insert(ex.query_id).second) throw DataError("duplicate query_id " + ex.query_id + " in split input");
  }
  std::set<std::size_t> held_out;
  for (QueryKind kind : {QueryKind::Cropped, QueryKind::Generated}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (examples[i].kind == kind) idx.push_back(i);
    }
    if (idx.size() < per_kind) {
      throw DataError("split needs " + std::to_string(per_kind) + " " + std::string(to_string(kind)) +
                      " examples, have " + std::to_string(idx.size()));
    }
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
    rng.shuffle(std::span(idx));
    held_out.insert(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_kind));
  }
  Split out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    (held_out.contains(i) ? out.validation : out.train).push_back(examples[i]);
  }
  return out;
}

}  // namespace distilrank
