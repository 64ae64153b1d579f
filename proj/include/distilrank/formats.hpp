#pragma once

// Readers and writers for every file the pipeline exchanges:
//   corpus.jsonl     {"doc_id": ..., "text": ...} per line
//   queries.tsv      query_id TAB text TAB (cropped|generated)
//   TREC run         qid Q0 docid rank score tag
//   TREC qrels       qid 0 docid grade
//   distilled.jsonl  one DistilledExample object per line

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "distilrank/error.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

namespace detail {

inline bool next_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

inline bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t'; });
}

inline std::vector<std::string_view> split_whitespace(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

inline std::vector<std::string_view> split_tabs(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = s.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, tab - start));
    start = tab + 1;
  }
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline bool has_whitespace(std::string_view s) {
  return s.find_first_of(" \t\r\n\v\f") != std::string_view::npos;
}

inline std::string format_score(double score) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", score);
  return buf;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- corpus

// Reads line-delimited JSON documents. Blank lines are skipped. Documents with
// empty text are accepted and counted in *empty_texts when provided.
inline std::vector<Document> parse_corpus(std::istream& in, std::size_t* empty_texts = nullptr) {
  std::vector<Document> docs;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  std::size_t empties = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(detail::at_line(lineno, std::string("malformed JSON: ") + e.what()));
    }
    if (!obj.is_object() || !obj.contains("doc_id") || !obj.contains("text") ||
        !obj["doc_id"].is_string() || !obj["text"].is_string()) {
      throw DataError(detail::at_line(lineno, "expected string fields \"doc_id\" and \"text\""));
    }
    Document doc{obj["doc_id"].get<std::string>(), obj["text"].get<std::string>()};
    if (doc.doc_id.empty() || detail::has_whitespace(doc.doc_id)) {
      throw DataError(detail::at_line(lineno, "doc_id must be non-empty without whitespace"));
    }
    if (!seen.insert(doc.doc_id).second) {
      throw DataError(detail::at_line(lineno, "duplicate doc_id " + doc.doc_id));
    }
    if (doc.text.empty()) ++empties;
    docs.push_back(std::move(doc));
  }
  if (empty_texts) *empty_texts = empties;
  return docs;
}

inline void write_corpus(std::ostream& out, const std::vector<Document>& docs) {
  for (const auto& d : docs) {
    nlohmann::ordered_json obj;
    obj["doc_id"] = d.doc_id;
    obj["text"] = d.text;
    out << obj.dump() << '\n';
  }
}

// ---------------------------------------------------------------- queries

inline std::vector<Query> parse_queries(std::istream& in) {
  std::vector<Query> queries;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 3) {
      throw DataError(detail::at_line(lineno, "expected 3 tab-separated columns, got " +
                                                  std::to_string(cols.size())));
    }
    const auto kind = parse_kind(cols[2]);
    if (!kind) throw DataError(detail::at_line(lineno, "unknown query kind '" + std::string(cols[2]) + "'"));
    Query q{std::string(cols[0]), std::string(cols[1]), *kind};
    if (q.query_id.empty() || detail::has_whitespace(q.query_id)) {
      throw DataError(detail::at_line(lineno, "query_id must be non-empty without whitespace"));
    }
    if (!seen.insert(q.query_id).second) {
      throw DataError(detail::at_line(lineno, "duplicate query_id " + q.query_id));
    }
    queries.push_back(std::move(q));
  }
  return queries;
}

inline void write_queries(std::ostream& out, const std::vector<Query>& queries) {
  for (const auto& q : queries) {
    out << q.query_id << '\t' << q.text << '\t' << to_string(q.kind) << '\n';
  }
}

// ---------------------------------------------------------------- runs

// Parses a six-column TREC run. Entries are grouped per query and sorted by
// rank; ranks must be exactly 1..n and scores non-increasing in rank.
inline Run read_run(std::istream& in) {
  Run run;
  std::map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto f = detail::split_whitespace(line);
    if (f.size() != 6) {
      throw DataError(detail::at_line(lineno, "expected 6 columns (qid Q0 docid rank score tag), got " +
                                                  std::to_string(f.size())));
    }
    RunEntry e;
    e.query_id = std::string(f[0]);
    e.doc_id = std::string(f[2]);
    if (!detail::parse_number(f[3], e.rank) || e.rank < 1) {
      throw DataError(detail::at_line(lineno, "rank must be a positive integer, got '" + std::string(f[3]) + "'"));
    }
    if (!detail::parse_number(f[4], e.score) || !std::isfinite(e.score)) {
      throw DataError(detail::at_line(lineno, "score must be a finite number, got '" + std::string(f[4]) + "'"));
    }
    e.tag = std::string(f[5]);
    first_line.try_emplace(e.query_id, lineno);
    run[e.query_id].push_back(std::move(e));
  }
  for (auto& [qid, entries] : run) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const RunEntry& a, const RunEntry& b) { return a.rank < b.rank; });
    std::set<std::string> docs;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const std::string where = "query " + qid + " (first seen at line " + std::to_string(first_line[qid]) + ")";
      if (entries[i].rank != static_cast<int>(i + 1)) {
        throw DataError(where + ": ranks must be 1.." + std::to_string(entries.size()) +
                        " without gaps or duplicates; found rank " + std::to_string(entries[i].rank) +
                        " at position " + std::to_string(i + 1));
      }
      if (i > 0 && entries[i].score > entries[i - 1].score) {
        throw DataError(where + ": score increases from rank " + std::to_string(i) + " to " +
                        std::to_string(i + 1));
      }
      if (!docs.insert(entries[i].doc_id).second) {
        throw DataError(where + ": duplicate doc_id " + entries[i].doc_id);
      }
    }
  }
  return run;
}

// Writes canonical run text: queries in lexicographic order, single spaces,
// %.6f scores. A non-empty `tag` replaces every entry's tag.
inline void write_run(std::ostream& out, const Run& run, std::string_view tag = {}) {
  for (const auto& [qid, entries] : run) {
    for (const auto& e : entries) {
      out << qid << " Q0 " << e.doc_id << ' ' << e.rank << ' ' << detail::format_score(e.score) << ' '
          << (tag.empty() ? std::string_view(e.tag) : tag) << '\n';
    }
  }
}

// ---------------------------------------------------------------- qrels

inline Qrels read_qrels(std::istream& in) {
  Qrels qrels;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto f = detail::split_whitespace(line);
    if (f.size() != 4) {
      throw DataError(detail::at_line(lineno, "expected 4 columns (qid 0 docid grade), got " +
                                                  std::to_string(f.size())));
    }
    int grade = 0;
    if (!detail::parse_number(f[3], grade)) {
      throw DataError(detail::at_line(lineno, "grade must be an integer, got '" + std::string(f[3]) + "'"));
    }
    if (grade < 0) throw DataError(detail::at_line(lineno, "negative grade " + std::to_string(grade)));
    auto [it, inserted] = qrels[std::string(f[0])].emplace(std::string(f[2]), grade);
    if (!inserted) {
      throw DataError(detail::at_line(lineno, "duplicate judgment for (" + std::string(f[0]) + ", " +
                                                  std::string(f[2]) + ")"));
    }
  }
  return qrels;
}

inline void write_qrels(std::ostream& out, const Qrels& qrels) {
  for (const auto& [qid, docs] : qrels) {
    for (const auto& [did, grade] : docs) out << qid << " 0 " << did << ' ' << grade << '\n';
  }
}

// ---------------------------------------------------------------- distilled

inline nlohmann::ordered_json to_json(const DistilledExample& ex) {
  nlohmann::ordered_json obj;
  obj["query_id"] = ex.query_id;
  obj["query_text"] = ex.query_text;
  obj["kind"] = std::string(to_string(ex.kind));
  obj["source_retriever"] = std::string(to_string(ex.source));
  obj["doc_ids"] = ex.doc_ids;
  obj["llm_ranking"] = ex.llm_ranking;
  obj["raw_response"] = ex.raw_response;
  obj["repaired"] = ex.repaired;
  return obj;
}

// Throws DataError (with the query id when known) on schema or invariant
// violations.
inline DistilledExample distilled_from_json(const nlohmann::json& obj) {
  DistilledExample ex;
  try {
    ex.query_id = obj.at("query_id").get<std::string>();
    ex.query_text = obj.at("query_text").get<std::string>();
    const auto kind = parse_kind(obj.at("kind").get<std::string>());
    if (!kind) throw DataError("query " + ex.query_id + ": unknown kind");
    ex.kind = *kind;
    const auto source = parse_source(obj.at("source_retriever").get<std::string>());
    if (!source) throw DataError("query " + ex.query_id + ": unknown source_retriever");
    ex.source = *source;
    ex.doc_ids = obj.at("doc_ids").get<std::vector<std::string>>();
    ex.llm_ranking = obj.at("llm_ranking").get<std::vector<int>>();
    ex.raw_response = obj.at("raw_response").get<std::string>();
    ex.repaired = obj.at("repaired").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("query " + (ex.query_id.empty() ? std::string("?") : ex.query_id) +
                    ": bad distilled record: " + e.what());
  }
  validate(ex);
  return ex;
}

inline std::string distilled_line(const DistilledExample& ex) {
  return to_json(ex).dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

inline void write_distilled(std::ostream& out, const std::vector<DistilledExample>& examples) {
  for (const auto& ex : examples) {
    validate(ex);
    out << distilled_line(ex) << '\n';
  }
}

inline std::vector<DistilledExample> read_distilled(std::istream& in) {
  std::vector<DistilledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(detail::at_line(lineno, std::string("malformed JSON: ") + e.what()));
    }
    try {
      out.push_back(distilled_from_json(obj));
    } catch (const DataError& e) {
      throw DataError(detail::at_line(lineno, e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------- file helpers

inline std::vector<Document> load_corpus(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return parse_corpus(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline std::vector<Query> load_queries(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return parse_queries(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline Run load_run(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return read_run(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline Qrels load_qrels(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return read_qrels(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline std::vector<DistilledExample> load_distilled(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return read_distilled(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace distilrank
