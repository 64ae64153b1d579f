#pragma once

// nDCG@k, the pool intersection statistic, a paired t-test, and reranking of
// runs with a trained scorer or external logits.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/retrieval.hpp"
#include "distilrank/scorer.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

// Exponential gain, log2(p + 1) discount, ideal DCG over every judged grade.
inline double ndcg_at_k(const std::vector<std::string>& ranked, const std::map<std::string, int>& grades,
                        std::size_t k) {
  if (k < 1) throw UsageError("ndcg: k must be >= 1");
  auto gain = [](int rel) { return std::exp2(static_cast<double>(rel)) - 1.0; };
  std::vector<int> ideal;
  for (const auto& [doc, g] : grades) ideal.push_back(g);
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, ideal.size()); ++p) idcg += gain(ideal[p]) / std::log2(p + 2.0);
  if (idcg <= 0.0) return 0.0;
  double dcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p) {
    const auto it = grades.find(ranked[p]);
    if (it != grades.end()) dcg += gain(it->second) / std::log2(p + 2.0);
  }
  return dcg / idcg;
}

struct EvalReport {
  std::map<std::string, double> per_query;
  double mean = 0.0;
  std::size_t k = 10;
  std::size_t count = 0;
};

inline std::vector<std::string> ranked_ids(const std::vector<RunEntry>& entries) {
  std::vector<std::string> ids;
  ids.reserve(entries.size());
  for (const auto& e : entries) ids.push_back(e.doc_id);
  return ids;
}

// Every judged query is evaluated; judged queries absent from the run score 0.
inline EvalReport evaluate_run(const Run& run, const Qrels& qrels, std::size_t k = 10) {
  EvalReport report;
  report.k = k;
  double total = 0.0;
  for (const auto& [qid, grades] : qrels) {
    const auto it = run.find(qid);
    const double v = it == run.end() ? 0.0 : ndcg_at_k(ranked_ids(it->second), grades, k);
    report.per_query[qid] = v;
    total += v;
  }
  report.count = report.per_query.size();
  report.mean = report.count ? total / static_cast<double>(report.count) : 0.0;
  return report;
}

inline void write_per_query(std::ostream& out, const std::map<std::string, double>& values) {
  for (const auto& [qid, v] : values) out << qid << '\t' << detail::format_score(v) << '\n';
}

inline std::map<std::string, double> read_per_query(std::istream& in) {
  std::map<std::string, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto cols = detail::split_tabs(line);
    double v;
    if (cols.size() != 2 || !detail::parse_number(cols[1], v) || !std::isfinite(v)) {
      throw DataError(detail::at_line(lineno, "expected qid<TAB>value"));
    }
    if (!out.emplace(std::string(cols[0]), v).second) {
      throw DataError(detail::at_line(lineno, "duplicate query " + std::string(cols[0])));
    }
  }
  return out;
}

// Mean over shared queries of |top-n(a) ∩ top-n(b)| / n.
inline double intersection_rate(const Run& a, const Run& b, std::size_t n = 30) {
  if (n < 1) throw UsageError("intersection: n must be >= 1");
  double total = 0.0;
  std::size_t shared = 0;
  for (const auto& [qid, ea] : a) {
    const auto it = b.find(qid);
    if (it == b.end()) continue;
    ++shared;
    std::set<std::string> sa;
    for (std::size_t i = 0; i < std::min(n, ea.size()); ++i) sa.insert(ea[i].doc_id);
    std::set<std::string> hit;
    const auto& eb = it->second;
    for (std::size_t i = 0; i < std::min(n, eb.size()); ++i) {
      if (sa.contains(eb[i].doc_id)) hit.insert(eb[i].doc_id);
    }
    total += static_cast<double>(hit.size()) / static_cast<double>(n);
  }
  if (shared == 0) throw DataError("intersection: the runs share no queries");
  return total / static_cast<double>(shared);
}

// source label -> run.
using RunSet = std::map<std::string, Run>;

struct IntersectionMatrix {
  std::vector<std::string> labels;
  // values[i][j] for i != j; the diagonal is NaN.
  std::vector<std::vector<double>> values;
};

inline IntersectionMatrix intersection_matrix(const RunSet& runs, std::size_t n = 30) {
  if (runs.size() < 2) throw UsageError("intersection matrix needs at least two sources");
  IntersectionMatrix m;
  for (const auto& [label, run] : runs) m.labels.push_back(label);
  const std::size_t s = m.labels.size();
  m.values.assign(s, std::vector<double>(s, std::nan("")));
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = i + 1; j < s; ++j) {
      const double v = intersection_rate(runs.at(m.labels[i]), runs.at(m.labels[j]), n);
      m.values[i][j] = v;
      m.values[j][i] = v;
    }
  }
  return m;
}

// Header row and column of labels, percentages with one decimal, "-" on the
// diagonal. With `lower` (computed over a second query kind and the same
// labels), the upper triangle shows `upper` and the lower triangle `lower`.
inline void write_intersection_tsv(std::ostream& out, const IntersectionMatrix& upper,
                                   const IntersectionMatrix* lower = nullptr) {
  if (lower && lower->labels != upper.labels) throw DataError("intersection matrices have different sources");
  auto cell = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  out << "source";
  for (const auto& l : upper.labels) out << '\t' << l;
  out << '\n';
  for (std::size_t i = 0; i < upper.labels.size(); ++i) {
    out << upper.labels[i];
    for (std::size_t j = 0; j < upper.labels.size(); ++j) {
      out << '\t';
      if (i == j) {
        out << '-';
      } else if (i < j || !lower) {
        out << cell(upper.values[i][j]);
      } else {
        out << cell(lower->values[i][j]);
      }
    }
    out << '\n';
  }
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  double mean_diff = 0.0;
};

// Two-sided paired t-test on a_q - b_q. All-zero differences give p = 1.
inline TTestResult paired_t_test(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  if (a.size() != b.size()) throw DataError("t-test: the two score sets cover different queries");
  std::vector<double> d;
  for (const auto& [qid, va] : a) {
    const auto it = b.find(qid);
    if (it == b.end()) throw DataError("t-test: query " + qid + " missing from the second score set");
    d.push_back(va - it->second);
  }
  if (d.size() < 2) throw DataError("t-test needs at least two paired queries");
  const double n = static_cast<double>(d.size());
  double mean = 0.0;
  for (double x : d) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  TTestResult r;
  r.df = d.size() - 1;
  r.mean_diff = mean;
  const bool all_zero = std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; });
  if (all_zero) return r;
  const double sd = std::sqrt(ss / (n - 1.0));
  if (sd == 0.0) {
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(n));
  boost::math::students_t dist(static_cast<double>(r.df));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

// ---------------------------------------------------------------- reranking

// Scores one (query, document) pair.
using PairScore = std::function<double(const std::string& query_id, const std::string& query_text,
                                       const std::string& doc_id, const std::string& doc_text)>;

inline PairScore model_scorer(const ScorerParams& params, ScoreStrategy strategy) {
  return [&params, strategy](const std::string&, const std::string& q, const std::string&, const std::string& d) {
    return score(forward(params, featurize(q, d, params.features)), strategy);
  };
}

inline PairScore logit_scorer(const LogitMap& logits, ScoreStrategy strategy) {
  return [&logits, strategy](const std::string& qid, const std::string&, const std::string& did, const std::string&) {
    const auto q = logits.find(qid);
    if (q == logits.end()) throw DataError("no logits for query " + qid);
    const auto d = q->second.find(did);
    if (d == q->second.end()) throw DataError("no logits for (" + qid + ", " + did + ")");
    return score(d->second, strategy);
  };
}

// Rescores the top k_in documents of each query, sorts by descending score
// with ties by ascending doc_id, and keeps k_out. Queries fan out over
// `threads` workers; the output does not depend on the thread count.
inline Run rerank_run(const PairScore& scorer, const Run& run, const std::map<std::string, std::string>& query_texts,
                      const DocTexts& docs, std::size_t k_in = 100, std::size_t k_out = 0, const std::string& tag = "rerank",
                      std::size_t threads = 1) {
  if (k_in < 1) throw UsageError("rerank: k_in must be >= 1");
  if (k_out == 0) k_out = k_in;
  std::vector<const std::string*> qids;
  for (const auto& [qid, entries] : run) qids.push_back(&qid);
  std::vector<std::vector<RunEntry>> results(qids.size());
  std::vector<std::string> errors(qids.size());
  auto work = [&](std::size_t i) {
    const std::string& qid = *qids[i];
    const auto qt = query_texts.find(qid);
    if (qt == query_texts.end()) throw DataError("rerank: no text for query " + qid);
    const auto& entries = run.at(qid);
    std::vector<ScoredDoc> scored;
    for (std::size_t r = 0; r < std::min(k_in, entries.size()); ++r) {
      const auto& id = entries[r].doc_id;
      if (!docs.contains(id)) throw DataError("rerank: document " + id + " (query " + qid + ") not in corpus");
      scored.push_back({id, scorer(qid, qt->second, id, docs.at(id))});
    }
    detail::sort_scored(scored);
    if (scored.size() > k_out) scored.resize(k_out);
    results[i] = to_run_entries(qid, scored, tag);
  };
  if (threads <= 1) {
    for (std::size_t i = 0; i < qids.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
          for (std::size_t i = next++; i < qids.size(); i = next++) {
            try {
              work(i);
            } catch (const std::exception& e) {
              errors[i] = e.what();
            }
          }
        });
      }
    }
    for (const auto& e : errors) {
      if (!e.empty()) throw DataError(e);
    }
  }
  Run out;
  for (std::size_t i = 0; i < qids.size(); ++i) out[*qids[i]] = std::move(results[i]);
  return out;
}

inline std::map<std::string, std::string> query_text_map(const std::vector<Query>& queries) {
  std::map<std::string, std::string> out;
  for (const auto& q : queries) out[q.query_id] = q.text;
  return out;
}

}  // namespace distilrank
