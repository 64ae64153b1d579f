#pragma once

// Seeded synthetic retrieval benchmark. Each topic owns a query vocabulary
// and a disjoint marker vocabulary. Documents mention a couple of query words
// (often from another topic), so lexical matching finds candidates, but only
// the markers say which candidates are relevant and how strongly.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "distilrank/augment.hpp"
#include "distilrank/error.hpp"
#include "distilrank/rng.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

struct SynthConfig {
  std::size_t topics = 8;
  std::size_t docs = 400;
  std::size_t train_queries = 64;
  std::size_t eval_queries = 16;
  std::uint64_t seed = 7;
  std::size_t query_vocab = 12;
  std::size_t marker_vocab = 12;
  std::size_t filler_vocab = 200;
  // Off-topic documents judged 0 per query, on top of every on-topic one.
  std::size_t judged_negatives = 20;
};

struct SynthBenchmark {
  std::vector<Document> corpus;
  std::vector<Query> train;
  std::vector<Query> eval;
  Qrels qrels;
  std::vector<GeneratedQuery> generated_pool;
  // Topic of each document, in corpus order.
  std::vector<std::size_t> doc_topics;
};

namespace detail {

// Pronounceable, collision-free words built from a namespace letter and an
// ordinal, e.g. "qa" + "bodu".
inline std::string synth_word(char ns, std::size_t topic, std::size_t i) {
  static constexpr char kCons[] = "bdfgklmnprstvz";
  static constexpr char kVow[] = "aeiou";
  std::string w(1, ns);
  std::size_t x = topic * 1000 + i;
  do {
    w += kCons[x % 14];
    x /= 14;
    w += kVow[x % 5];
    x /= 5;
  } while (x > 0);
  return w;
}

template <typename T>
std::vector<T> draw_distinct(const std::vector<T>& from, std::size_t n, Rng& rng) {
  std::vector<T> pool = from;
  for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(n);
  return pool;
}

}  // namespace detail

// Grade of an on-topic document with c markers: min(3, c / 2), so 3..8
// markers map to grades 1..3. Off-topic documents are 0.
inline int synth_grade(std::size_t markers) { return static_cast<int>(std::min<std::size_t>(3, markers / 2)); }

inline SynthBenchmark synth_benchmark(const SynthConfig& c) {
  if (c.topics < 2) throw UsageError("synth: at least two topics are required");
  if (c.docs < 10 * c.topics) throw UsageError("synth: docs must be >= 10 x topics");
  if (c.query_vocab < 6 || c.marker_vocab < 8 || c.filler_vocab < 1) throw UsageError("synth: vocabularies too small");
  Rng rng(c.seed);
  std::vector<std::vector<std::string>> qwords(c.topics), markers(c.topics);
  for (std::size_t t = 0; t < c.topics; ++t) {
    for (std::size_t i = 0; i < c.query_vocab; ++i) qwords[t].push_back(detail::synth_word('q', t, i));
    for (std::size_t i = 0; i < c.marker_vocab; ++i) markers[t].push_back(detail::synth_word('m', t, i));
  }
  std::vector<std::string> filler;
  for (std::size_t i = 0; i < c.filler_vocab; ++i) filler.push_back(detail::synth_word('f', 0, i));

  SynthBenchmark out;
  std::vector<std::size_t> marker_count(c.docs);
  for (std::size_t d = 0; d < c.docs; ++d) {
    // Round-robin then shuffled below, so every topic gets documents.
    const std::size_t topic = d % c.topics;
    const std::size_t n_markers = static_cast<std::size_t>(rng.between(3, 8));
    marker_count[d] = n_markers;
    std::vector<std::string> words = detail::draw_distinct(markers[topic], n_markers, rng);
    const std::size_t n_query = static_cast<std::size_t>(rng.between(1, 2));
    for (std::size_t i = 0; i < n_query; ++i) {
      const std::size_t from = rng.unit() < 0.5 ? topic : rng.below(c.topics);
      words.push_back(qwords[from][rng.below(c.query_vocab)]);
    }
    const std::size_t n_filler = static_cast<std::size_t>(rng.between(10, 30));
    for (std::size_t i = 0; i < n_filler; ++i) words.push_back(filler[rng.below(filler.size())]);
    rng.shuffle(std::span(words));
    std::string text;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) text += (i % 9 == 0) ? ". " : " ";
      text += words[i];
    }
    text += '.';
    out.doc_topics.push_back(topic);
    out.corpus.push_back({"", std::move(text)});
  }
  // Shuffle document order, then assign ids so ids carry no topic signal.
  std::vector<std::size_t> perm(c.docs);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span(perm));
  std::vector<Document> corpus(c.docs);
  std::vector<std::size_t> topics(c.docs), counts(c.docs);
  for (std::size_t i = 0; i < c.docs; ++i) {
    corpus[i] = std::move(out.corpus[perm[i]]);
    char id[32];
    std::snprintf(id, sizeof id, "d%04zu", i + 1);
    corpus[i].doc_id = id;
    topics[i] = out.doc_topics[perm[i]];
    counts[i] = marker_count[perm[i]];
  }
  out.corpus = std::move(corpus);
  out.doc_topics = topics;

  std::vector<std::vector<std::size_t>> docs_of(c.topics);
  for (std::size_t i = 0; i < c.docs; ++i) docs_of[out.doc_topics[i]].push_back(i);

  auto make_query = [&](const std::string& id, std::size_t topic, QueryKind kind) {
    const std::size_t n = static_cast<std::size_t>(rng.between(3, 6));
    auto words = detail::draw_distinct(qwords[topic], n, rng);
    if (kind == QueryKind::Cropped) {
      // Cropped sentences carry some incidental filler.
      const std::size_t extra = static_cast<std::size_t>(rng.between(1, 2));
      for (std::size_t i = 0; i < extra; ++i) words.push_back(filler[rng.below(filler.size())]);
      rng.shuffle(std::span(words));
    }
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    auto& grades = out.qrels[id];
    for (std::size_t d : docs_of[topic]) grades[out.corpus[d].doc_id] = synth_grade(counts[d]);
    std::vector<std::size_t> off;
    for (std::size_t d = 0; d < c.docs; ++d) {
      if (out.doc_topics[d] != topic) off.push_back(d);
    }
    for (std::size_t d : detail::draw_distinct(off, std::min(c.judged_negatives, off.size()), rng)) {
      grades[out.corpus[d].doc_id] = 0;
    }
    return Query{id, text, kind};
  };
  for (std::size_t i = 0; i < c.train_queries; ++i) {
    char id[24];
    std::snprintf(id, sizeof id, "train-%03zu", i + 1);
    out.train.push_back(make_query(id, i % c.topics, i % 2 ? QueryKind::Generated : QueryKind::Cropped));
  }
  for (std::size_t i = 0; i < c.eval_queries; ++i) {
    char id[24];
    std::snprintf(id, sizeof id, "eval-%03zu", i + 1);
    out.eval.push_back(make_query(id, i % c.topics, i % 2 ? QueryKind::Generated : QueryKind::Cropped));
  }
  for (std::size_t d = 0; d < c.docs; ++d) {
    const std::size_t n = static_cast<std::size_t>(rng.between(3, 5));
    std::string text;
    for (const auto& w : detail::draw_distinct(qwords[out.doc_topics[d]], n, rng)) text += (text.empty() ? "" : " ") + w;
    out.generated_pool.push_back({out.corpus[d].doc_id, text});
  }
  return out;
}

}  // namespace distilrank
