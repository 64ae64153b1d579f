#pragma once

// First-stage retrievers: a native BM25 inverted index, exact dot-product
// search over ingested dense vectors, an adapter exposing precomputed runs as
// retrievers, and BM25-then-external-rerank composition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/tokenize.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;

  bool operator==(const ScoredDoc&) const = default;
};

struct Posting {
  std::uint32_t doc = 0;
  std::uint32_t tf = 0;

  bool operator==(const Posting&) const = default;
};

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct InvertedIndex {
  std::map<std::string, std::vector<Posting>> postings;
  std::vector<std::uint32_t> doc_lengths;
  std::vector<std::string> doc_ids;
  double avgdl = 0.0;
  Bm25Params params;
  TokenizerConfig tokenizer;

  std::size_t size() const { return doc_ids.size(); }
};

namespace detail {

inline void sort_scored(std::vector<ScoredDoc>& docs) {
  std::sort(docs.begin(), docs.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  });
}

inline void require_k(std::size_t k) {
  if (k < 1) throw UsageError("k must be >= 1");
}

inline double bm25_idf(std::size_t n_docs, std::size_t df) {
  const double n = static_cast<double>(n_docs);
  const double d = static_cast<double>(df);
  return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

inline double bm25_term(double idf, double tf, double doc_len, const InvertedIndex& index) {
  const double k1 = index.params.k1;
  const double b = index.params.b;
  return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / index.avgdl));
}

}  // namespace detail

inline InvertedIndex build_index(const std::vector<Document>& corpus, const TokenizerConfig& tokenizer = {},
                                 Bm25Params params = {}) {
  if (!(params.k1 > 0.0)) throw UsageError("bm25 k1 must be > 0");
  if (!(params.b >= 0.0 && params.b <= 1.0)) throw UsageError("bm25 b must lie in [0, 1]");
  InvertedIndex index;
  index.params = params;
  index.tokenizer = tokenizer;
  index.doc_ids.reserve(corpus.size());
  index.doc_lengths.reserve(corpus.size());
  double total = 0.0;
  for (std::size_t ord = 0; ord < corpus.size(); ++ord) {
    const auto tokens = tokenize(corpus[ord].text, tokenizer);
    std::map<std::string, std::uint32_t> tf;
    for (const auto& t : tokens) ++tf[t];
    for (const auto& [term, count] : tf) {
      index.postings[term].push_back({static_cast<std::uint32_t>(ord), count});
    }
    index.doc_ids.push_back(corpus[ord].doc_id);
    index.doc_lengths.push_back(static_cast<std::uint32_t>(tokens.size()));
    total += static_cast<double>(tokens.size());
  }
  index.avgdl = corpus.empty() ? 0.0 : total / static_cast<double>(corpus.size());
  return index;
}

// Lucene-style BM25. Every query token occurrence contributes, so a repeated
// query term counts once per repetition.
inline double bm25_score(const InvertedIndex& index, const std::vector<std::string>& query_tokens,
                         std::size_t ordinal) {
  if (ordinal >= index.size()) {
    throw UsageError("document ordinal " + std::to_string(ordinal) + " out of range (N=" +
                     std::to_string(index.size()) + ")");
  }
  double score = 0.0;
  const double dl = index.doc_lengths[ordinal];
  for (const auto& term : query_tokens) {
    const auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    const auto& plist = it->second;
    const auto p = std::lower_bound(plist.begin(), plist.end(), ordinal,
                                    [](const Posting& a, std::size_t o) { return a.doc < o; });
    if (p == plist.end() || p->doc != ordinal) continue;
    const double idf = detail::bm25_idf(index.size(), plist.size());
    score += detail::bm25_term(idf, p->tf, dl, index);
  }
  return score;
}

// Term-at-a-time top-k. Only documents with a positive score are returned;
// ties are broken by ascending doc_id.
inline std::vector<ScoredDoc> search_bm25(const InvertedIndex& index, std::string_view query_text,
                                          std::size_t k = 30) {
  detail::require_k(k);
  const auto tokens = tokenize(query_text, index.tokenizer);
  std::vector<double> acc(index.size(), 0.0);
  std::vector<char> seen(index.size(), 0);
  std::vector<std::uint32_t> touched;
  for (const auto& term : tokens) {
    const auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    const auto& plist = it->second;
    const double idf = detail::bm25_idf(index.size(), plist.size());
    for (const auto& p : plist) {
      if (!seen[p.doc]) {
        seen[p.doc] = 1;
        touched.push_back(p.doc);
      }
      acc[p.doc] += detail::bm25_term(idf, p.tf, index.doc_lengths[p.doc], index);
    }
  }
  std::vector<ScoredDoc> hits;
  hits.reserve(touched.size());
  for (auto ord : touched) {
    if (acc[ord] > 0.0) hits.push_back({index.doc_ids[ord], acc[ord]});
  }
  detail::sort_scored(hits);
  if (hits.size() > k) hits.resize(k);
  return hits;
}

inline std::vector<RunEntry> to_run_entries(const std::string& query_id, const std::vector<ScoredDoc>& docs,
                                            const std::string& tag) {
  std::vector<RunEntry> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    out.push_back({query_id, docs[i].doc_id, static_cast<int>(i + 1), docs[i].score, tag});
  }
  return out;
}

// Retrieves a run for many queries. With threads > 1 queries are fanned out;
// the result is keyed by query_id so scheduling does not affect it.
inline Run retrieve_bm25_run(const InvertedIndex& index, const std::vector<Query>& queries, std::size_t k,
                             const std::string& tag = "bm25", unsigned threads = 1) {
  std::vector<std::vector<ScoredDoc>> results(queries.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < queries.size(); i += stride) results[i] = search_bm25(index, queries[i].text, k);
  };
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }
  Run run;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (!results[i].empty()) run[queries[i].query_id] = to_run_entries(queries[i].query_id, results[i], tag);
  }
  return run;
}

// ---------------------------------------------------------------- index files

inline void save_index(std::ostream& out, const InvertedIndex& index) {
  nlohmann::json obj;
  obj["format"] = "distilrank-bm25";
  obj["k1"] = index.params.k1;
  obj["b"] = index.params.b;
  obj["lowercase"] = index.tokenizer.lowercase;
  obj["min_token_length"] = index.tokenizer.min_token_length;
  obj["doc_ids"] = index.doc_ids;
  obj["doc_lengths"] = index.doc_lengths;
  auto& postings = obj["postings"] = nlohmann::json::object();
  for (const auto& [term, plist] : index.postings) {
    auto arr = nlohmann::json::array();
    for (const auto& p : plist) arr.push_back({p.doc, p.tf});
    postings[term] = std::move(arr);
  }
  out << obj.dump() << '\n';
}

inline InvertedIndex load_index(std::istream& in) {
  InvertedIndex index;
  try {
    const auto obj = nlohmann::json::parse(in);
    if (obj.value("format", "") != "distilrank-bm25") throw DataError("not a distilrank BM25 index");
    index.params = {obj.at("k1").get<double>(), obj.at("b").get<double>()};
    index.tokenizer.lowercase = obj.at("lowercase").get<bool>();
    index.tokenizer.min_token_length = obj.at("min_token_length").get<std::size_t>();
    index.doc_ids = obj.at("doc_ids").get<std::vector<std::string>>();
    index.doc_lengths = obj.at("doc_lengths").get<std::vector<std::uint32_t>>();
    for (const auto& [term, arr] : obj.at("postings").items()) {
      auto& plist = index.postings[term];
      for (const auto& p : arr) plist.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed index: ") + e.what());
  }
  if (index.doc_ids.size() != index.doc_lengths.size()) throw DataError("malformed index: length tables disagree");
  double total = 0.0;
  for (auto len : index.doc_lengths) total += len;
  index.avgdl = index.doc_ids.empty() ? 0.0 : total / static_cast<double>(index.doc_ids.size());
  return index;
}

// ---------------------------------------------------------------- dense

struct DenseStore {
  std::size_t dimension = 0;
  std::map<std::string, std::vector<double>> vectors;
};

// Line-delimited {"doc_id": ..., "vector": [...]}; the first record fixes the
// dimension. Also used for query vectors keyed by "query_id".
inline DenseStore read_dense_store(std::istream& in, const std::string& id_field = "doc_id") {
  DenseStore store;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    std::string id;
    std::vector<double> vec;
    try {
      const auto obj = nlohmann::json::parse(line);
      id = obj.at(id_field).get<std::string>();
      vec = obj.at("vector").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(detail::at_line(lineno, std::string("bad vector record: ") + e.what()));
    }
    if (store.vectors.empty()) store.dimension = vec.size();
    if (vec.size() != store.dimension) {
      throw DataError(detail::at_line(lineno, "vector dimension " + std::to_string(vec.size()) + " != " +
                                                  std::to_string(store.dimension)));
    }
    for (double v : vec) {
      if (!std::isfinite(v)) throw DataError(detail::at_line(lineno, "non-finite vector component"));
    }
    if (!store.vectors.emplace(id, std::move(vec)).second) {
      throw DataError(detail::at_line(lineno, "duplicate " + id_field + " " + id));
    }
  }
  return store;
}

inline std::vector<ScoredDoc> search_dense(const DenseStore& store, const std::vector<double>& query, std::size_t k) {
  detail::require_k(k);
  if (!store.vectors.empty() && query.size() != store.dimension) {
    throw DataError("query vector dimension " + std::to_string(query.size()) + " does not match store dimension " +
                    std::to_string(store.dimension));
  }
  std::vector<ScoredDoc> hits;
  hits.reserve(store.vectors.size());
  for (const auto& [id, vec] : store.vectors) {
    double dot = 0.0;
    for (std::size_t i = 0; i < vec.size(); ++i) dot += vec[i] * query[i];
    hits.push_back({id, dot});
  }
  detail::sort_scored(hits);
  if (hits.size() > k) hits.resize(k);
  return hits;
}

// ---------------------------------------------------------------- run adapter

// Precomputed runs act as retrievers. A query absent from the run yields an
// empty list and bumps *missing when provided.
inline std::vector<ScoredDoc> search_runfile(const Run& run, const std::string& query_id, std::size_t k,
                                             std::size_t* missing = nullptr) {
  detail::require_k(k);
  std::vector<ScoredDoc> out;
  const auto it = run.find(query_id);
  if (it == run.end()) {
    if (missing) ++*missing;
    return out;
  }
  for (const auto& e : it->second) {
    if (out.size() == k) break;
    out.push_back({e.doc_id, e.score});
  }
  return out;
}

// ---------------------------------------------------------------- composition

// query_id -> doc_id -> external score.
using ScoreMap = std::map<std::string, std::map<std::string, double>>;

inline ScoreMap read_score_map(std::istream& in) {
  ScoreMap scores;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto cols = detail::split_tabs(line);
    double s = 0.0;
    if (cols.size() != 3 || !detail::parse_number(cols[2], s) || !std::isfinite(s)) {
      throw DataError(detail::at_line(lineno, "expected qid<TAB>docid<TAB>score"));
    }
    if (!scores[std::string(cols[0])].emplace(std::string(cols[1]), s).second) {
      throw DataError(detail::at_line(lineno, "duplicate score for (" + std::string(cols[0]) + ", " +
                                                  std::string(cols[1]) + ")"));
    }
  }
  return scores;
}

// Reorders the top-k_pool entries of every base query by the external score
// and keeps k_out. Equal external scores keep their base order.
inline Run compose_rerank(const Run& base, const ScoreMap& scores, std::size_t k_pool = 100, std::size_t k_out = 30,
                          const std::string& tag = "compose") {
  detail::require_k(k_pool);
  detail::require_k(k_out);
  if (k_out > k_pool) throw UsageError("k_out must not exceed k_pool");
  Run out;
  for (const auto& [qid, entries] : base) {
    const auto qit = scores.find(qid);
    std::vector<ScoredDoc> pooled;
    for (std::size_t i = 0; i < entries.size() && i < k_pool; ++i) {
      const auto& did = entries[i].doc_id;
      if (qit == scores.end() || !qit->second.contains(did)) {
        throw DataError("missing external score for (" + qid + ", " + did + ")");
      }
      pooled.push_back({did, qit->second.at(did)});
    }
    std::stable_sort(pooled.begin(), pooled.end(),
                     [](const ScoredDoc& a, const ScoredDoc& b) { return a.score > b.score; });
    if (pooled.size() > k_out) pooled.resize(k_out);
    out[qid] = to_run_entries(qid, pooled, tag);
  }
  return out;
}

}  // namespace distilrank
