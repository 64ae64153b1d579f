#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "distilrank/error.hpp"

namespace distilrank {

struct Document {
  std::string doc_id;
  std::string text;

  bool operator==(const Document&) const = default;
};

enum class QueryKind { Cropped, Generated };

struct Query {
  std::string query_id;
  std::string text;
  QueryKind kind = QueryKind::Generated;

  bool operator==(const Query&) const = default;
};

// The four first-stage sources pooled for distillation. MonoT5 denotes the
// BM25 top-100 reranked by an external cross-encoder.
enum class Source { BM25, SPLADE, DRAGON, MonoT5 };

inline constexpr Source kAllSources[] = {Source::BM25, Source::SPLADE, Source::DRAGON,
                                         Source::MonoT5};

struct RunEntry {
  std::string query_id;
  std::string doc_id;
  int rank = 0;
  double score = 0.0;
  std::string tag;

  bool operator==(const RunEntry&) const = default;
};

// query_id -> entries ordered by rank 1..n.
using Run = std::map<std::string, std::vector<RunEntry>>;

// query_id -> doc_id -> grade.
using Qrels = std::map<std::string, std::map<std::string, int>>;

// One distillation training unit: a query, its pooled documents in retrieval
// order, and the teacher's ranks. llm_ranking[i] is the rank of doc_ids[i].
struct DistilledExample {
  std::string query_id;
  std::string query_text;
  QueryKind kind = QueryKind::Generated;
  Source source = Source::BM25;
  std::vector<std::string> doc_ids;
  std::vector<int> llm_ranking;
  std::string raw_response;
  bool repaired = false;

  std::size_t size() const { return doc_ids.size(); }
  bool operator==(const DistilledExample&) const = default;
};

inline constexpr std::string_view to_string(QueryKind kind) {
  return kind == QueryKind::Cropped ? "cropped" : "generated";
}

inline std::optional<QueryKind> parse_kind(std::string_view s) {
  if (s == "cropped") return QueryKind::Cropped;
  if (s == "generated") return QueryKind::Generated;
  return std::nullopt;
}

inline constexpr std::string_view to_string(Source source) {
  switch (source) {
    case Source::BM25: return "bm25";
    case Source::SPLADE: return "splade";
    case Source::DRAGON: return "dragon";
    case Source::MonoT5: return "monot5";
  }
  return "bm25";
}

inline std::optional<Source> parse_source(std::string_view s) {
  for (Source src : kAllSources) {
    if (to_string(src) == s) return src;
  }
  return std::nullopt;
}

// True when `ranking` contains each of 1..ranking.size() exactly once.
inline bool is_permutation_of_1_to_m(const std::vector<int>& ranking) {
  std::vector<bool> seen(ranking.size() + 1, false);
  for (int r : ranking) {
    if (r < 1 || static_cast<std::size_t>(r) > ranking.size() || seen[r]) return false;
    seen[r] = true;
  }
  return true;
}

inline void validate(const DistilledExample& ex) {
  if (ex.doc_ids.size() != ex.llm_ranking.size()) {
    throw DataError("query " + ex.query_id + ": " + std::to_string(ex.doc_ids.size()) +
                    " doc_ids but " + std::to_string(ex.llm_ranking.size()) + " ranks");
  }
  if (!is_permutation_of_1_to_m(ex.llm_ranking)) {
    throw DataError("query " + ex.query_id + ": llm_ranking is not a permutation of 1.." +
                    std::to_string(ex.llm_ranking.size()));
  }
}

// doc_id -> text, for stages that need passage bodies by id.
class DocTexts {
 public:
  DocTexts() = default;
  explicit DocTexts(const std::vector<Document>& corpus) {
    for (const auto& d : corpus) texts_.emplace(d.doc_id, d.text);
  }

  const std::string& at(const std::string& doc_id) const {
    const auto it = texts_.find(doc_id);
    if (it == texts_.end()) throw DataError("document " + doc_id + " not found in corpus");
    return it->second;
  }
  bool contains(const std::string& doc_id) const { return texts_.contains(doc_id); }
  std::size_t size() const { return texts_.size(); }

 private:
  std::unordered_map<std::string, std::string> texts_;
};

}  // namespace distilrank
