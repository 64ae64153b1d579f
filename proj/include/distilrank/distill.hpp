#pragma once

// Second-stage labeling driver. Each query's pooled documents go to the
// teacher through window_rerank; finished examples are committed to an
// append-only journal so an interrupted job resumes without repeating work.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <boost/crc.hpp>

#include "json.hpp"

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/llm.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

inline std::uint32_t crc32(std::string_view data) {
  boost::crc_32_type crc;
  crc.process_bytes(data.data(), data.size());
  return crc.checksum();
}

// Journal line: 8 hex digits of CRC-32 over the payload, a tab, then the
// example as one JSON object. A final line without its newline is a write cut
// short by a kill and is discarded on open; any other bad line is corruption.
class Journal {
 public:
  explicit Journal(std::string path) : path_(std::move(path)) {
    std::size_t keep = 0;
    if (std::filesystem::exists(path_)) keep = load();
    if (std::filesystem::exists(path_) && keep != std::filesystem::file_size(path_)) {
      std::filesystem::resize_file(path_, keep);
    }
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw DataError("cannot open journal " + path_);
  }

  const std::map<std::string, DistilledExample>& completed() const { return completed_; }
  bool contains(const std::string& query_id) const {
    std::lock_guard lock(mu_);
    return completed_.contains(query_id);
  }
  std::size_t discarded_tail_bytes() const { return discarded_tail_; }

  void append(const DistilledExample& ex) {
    validate(ex);
    const std::string payload = distilled_line(ex);
    char crc[9];
    std::snprintf(crc, sizeof crc, "%08x", crc32(payload));
    const std::string line = std::string(crc) + '\t' + payload + '\n';
    std::lock_guard lock(mu_);
    if (completed_.contains(ex.query_id)) throw DataError("journal already holds query " + ex.query_id);
    out_.write(line.data(), static_cast<std::streamsize>(line.size()));
    out_.flush();
    if (!out_) throw DataError("write to journal " + path_ + " failed");
    completed_.emplace(ex.query_id, ex);
  }

 private:
  // Returns the byte length of the valid prefix.
  std::size_t load() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw DataError("cannot read journal " + path_);
    const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    std::size_t lineno = 0;
    while (pos < content.size()) {
      const auto nl = content.find('\n', pos);
      if (nl == std::string::npos) {
        discarded_tail_ = content.size() - pos;
        return pos;
      }
      ++lineno;
      const std::string_view line(content.data() + pos, nl - pos);
      auto corrupt = [&](const std::string& why) {
        return DataError("journal " + path_ + " corrupt at " + detail::at_line(lineno, why));
      };
      if (line.size() < 10 || line[8] != '\t') throw corrupt("missing checksum");
      const auto payload = line.substr(9);
      std::uint32_t stored = 0;
      if (std::sscanf(std::string(line.substr(0, 8)).c_str(), "%8x", &stored) != 1 || stored != crc32(payload)) {
        throw corrupt("checksum mismatch");
      }
      DistilledExample ex;
      try {
        ex = distilled_from_json(nlohmann::json::parse(payload));
      } catch (const nlohmann::json::exception& e) {
        throw corrupt(e.what());
      } catch (const DataError& e) {
        throw corrupt(e.what());
      }
      if (!completed_.emplace(ex.query_id, ex).second) throw corrupt("duplicate query " + ex.query_id);
      pos = nl + 1;
    }
    return pos;
  }

  std::string path_;
  std::ofstream out_;
  mutable std::mutex mu_;
  std::map<std::string, DistilledExample> completed_;
  std::size_t discarded_tail_ = 0;
};

struct Retrieved {
  Source source = Source::BM25;
  std::vector<Document> docs;
};

using RetrieveFn = std::function<Retrieved(const Query&)>;

struct DistillOptions {
  std::size_t max_docs = 30;
  WindowPlan plan{30, 10};
  std::size_t passage_words = 120;
  std::size_t max_in_flight = 4;
  PromptTemplate prompt;
};

struct DistillFailure {
  std::string query_id;
  std::string message;
};

struct DistillReport {
  // Every journaled example for the requested queries, sorted by query_id.
  std::vector<DistilledExample> examples;
  std::size_t resumed = 0;
  std::size_t labeled = 0;
  std::size_t llm_calls = 0;
  std::vector<DistillFailure> failures;
};

// Labels a single query. Exposed for callers that manage their own journal.
inline DistilledExample label_query(const Query& query, const Retrieved& pool, const LlmFn& llm,
                                    const DistillOptions& options, std::size_t* calls = nullptr) {
  const std::size_t m = std::min(pool.docs.size(), options.max_docs);
  const WindowPlan plan{std::min(options.plan.window, std::max<std::size_t>(m, 1)),
                        std::min(options.plan.step, std::min(options.plan.window, std::max<std::size_t>(m, 1)))};
  auto ask = [&](std::span<const int> window) {
    LlmRequest req;
    req.query_id = query.query_id;
    std::vector<std::string> texts;
    for (int pos : window) {
      const auto& doc = pool.docs[static_cast<std::size_t>(pos - 1)];
      req.doc_ids.push_back(doc.doc_id);
      texts.push_back(doc.text);
    }
    req.messages = build_prompt(query.text, texts, options.prompt, options.passage_words);
    return llm(req);
  };
  const auto result = window_rerank(m, ask, plan);
  if (calls) *calls += result.calls;
  DistilledExample ex;
  ex.query_id = query.query_id;
  ex.query_text = query.text;
  ex.kind = query.kind;
  ex.source = pool.source;
  for (std::size_t i = 0; i < m; ++i) ex.doc_ids.push_back(pool.docs[i].doc_id);
  ex.llm_ranking = result.permutation.ranks;
  for (std::size_t i = 0; i < result.responses.size(); ++i) {
    if (i) ex.raw_response += '\n';
    ex.raw_response += result.responses[i];
  }
  ex.repaired = result.permutation.repaired;
  return ex;
}

// Runs labeling for every query not already in the journal, at most
// max_in_flight teacher calls at a time. Transport failures are recorded per
// query and skipped; a budget error stops the job after in-flight work
// settles. The report's examples do not depend on scheduling.
inline DistillReport distill(const std::vector<Query>& queries, const RetrieveFn& retrieve, const LlmFn& llm,
                             const std::string& journal_path, const DistillOptions& options = {}) {
  if (options.max_in_flight < 1) throw UsageError("max_in_flight must be >= 1");
  Journal journal(journal_path);
  DistillReport report;

  std::vector<const Query*> pending;
  std::set<std::string> requested;
  for (const auto& q : queries) {
    if (!requested.insert(q.query_id).second) throw DataError("duplicate query_id " + q.query_id);
    if (journal.contains(q.query_id)) {
      ++report.resumed;
    } else {
      pending.push_back(&q);
    }
  }
  std::sort(pending.begin(), pending.end(), [](const Query* a, const Query* b) { return a->query_id < b->query_id; });

  std::vector<Retrieved> pools(pending.size());
  for (std::size_t i = 0; i < pending.size(); ++i) pools[i] = retrieve(*pending[i]);

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr fatal;
  auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      const Query& q = *pending[i];
      if (pools[i].docs.empty()) {
        std::lock_guard lock(mu);
        report.failures.push_back({q.query_id, "retriever returned no documents"});
        continue;
      }
      try {
        std::size_t calls = 0;
        auto ex = label_query(q, pools[i], llm, options, &calls);
        journal.append(ex);
        std::lock_guard lock(mu);
        report.llm_calls += calls;
        ++report.labeled;
      } catch (const BudgetError&) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        stop = true;
      } catch (const TransportError& e) {
        std::lock_guard lock(mu);
        report.failures.push_back({q.query_id, e.what()});
      } catch (...) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        stop = true;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = std::min(options.max_in_flight, std::max<std::size_t>(pending.size(), 1));
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);

  for (const auto& [qid, ex] : journal.completed()) {
    if (requested.contains(qid)) report.examples.push_back(ex);
  }
  std::sort(report.failures.begin(), report.failures.end(),
            [](const DistillFailure& a, const DistillFailure& b) { return a.query_id < b.query_id; });
  return report;
}

}  // namespace distilrank
