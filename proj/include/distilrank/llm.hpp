#pragma once

// Listwise permutation labeling with a chat model: prompt construction,
// permutation parsing and repair, bottom-up sliding windows, a deterministic
// qrels-backed teacher, and a character-based cost estimate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

struct Message {
  std::string role;
  std::string content;

  bool operator==(const Message&) const = default;
};

// What a teacher callable sees for one window. Live clients only read
// `messages`; the offline teacher uses the identifiers.
struct LlmRequest {
  std::string query_id;
  std::vector<std::string> doc_ids;
  std::vector<Message> messages;
};

using LlmFn = std::function<std::string(const LlmRequest&)>;

// Placeholders: preamble {m}; passage {index} {passage}; postamble {m} {query}.
struct PromptTemplate {
  std::string system =
      "You are RankGPT, an intelligent assistant that can rank passages based on their relevancy to the query.";
  std::string preamble =
      "I will provide you with {m} passages, each indicated by number identifier []. "
      "Rank the passages based on their relevance to the search query.\n\n";
  std::string passage = "[{index}] {passage}\n";
  std::string postamble =
      "\nSearch Query: {query}.\n"
      "Rank the {m} passages above based on their relevance to the search query. "
      "The passages should be listed in descending order using identifiers. "
      "The most relevant passages should be listed first. "
      "The output format should be [] > [], e.g., [1] > [2]. "
      "Only response the ranking results, do not say any word or explain.";
};

struct WindowPlan {
  std::size_t window = 30;
  std::size_t step = 10;
};

namespace detail {

// Names of the {placeholders} in s, in order. An unmatched '{' is reported as
// the empty name.
inline std::vector<std::string> placeholders(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = s.find('{'); i != std::string_view::npos; i = s.find('{', i + 1)) {
    const std::size_t close = s.find('}', i);
    out.emplace_back(close == std::string_view::npos ? std::string_view{} : s.substr(i + 1, close - i - 1));
  }
  return out;
}

inline void check_section(std::string_view name, std::string_view text, std::initializer_list<std::string_view> want) {
  const auto found = placeholders(text);
  for (const auto& p : found) {
    if (std::find(want.begin(), want.end(), p) == want.end()) {
      throw DataError("prompt template " + std::string(name) + ": unexpected placeholder {" + p + "}");
    }
  }
  for (auto w : want) {
    if (std::find(found.begin(), found.end(), w) == found.end()) {
      throw DataError("prompt template " + std::string(name) + ": missing placeholder {" + std::string(w) + "}");
    }
  }
}

// Single-pass substitution; substituted values are not rescanned.
inline std::string substitute(std::string_view text, const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      const std::size_t close = text.find('}', i);
      if (close != std::string_view::npos) {
        const auto it = values.find(text.substr(i + 1, close - i - 1));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(text[i++]);
  }
  return out;
}

}  // namespace detail

inline void validate(const PromptTemplate& t) {
  detail::check_section("system", t.system, {});
  detail::check_section("preamble", t.preamble, {"m"});
  detail::check_section("passage", t.passage, {"index", "passage"});
  detail::check_section("postamble", t.postamble, {"m", "query"});
}

// Template file: sections introduced by lines "@@system", "@@preamble",
// "@@passage", "@@postamble". A section's text is its lines joined with '\n',
// so a trailing blank line encodes a trailing newline. Omitted sections keep
// their defaults.
inline PromptTemplate read_prompt_template(std::istream& in) {
  PromptTemplate t;
  std::map<std::string, std::vector<std::string>> sections;
  std::string current;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.starts_with("@@")) {
      current = line.substr(2);
      if (current != "system" && current != "preamble" && current != "passage" && current != "postamble") {
        throw DataError("prompt template: " + detail::at_line(lineno, "unknown section @@" + current));
      }
      sections[current].clear();
      continue;
    }
    if (current.empty()) {
      if (!detail::is_blank(line)) {
        throw DataError("prompt template: " + detail::at_line(lineno, "text before the first @@section"));
      }
      continue;
    }
    sections[current].push_back(line);
  }
  auto joined = [](const std::vector<std::string>& lines) {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i) out += '\n';
      out += lines[i];
    }
    return out;
  };
  if (sections.contains("system")) t.system = joined(sections["system"]);
  if (sections.contains("preamble")) t.preamble = joined(sections["preamble"]);
  if (sections.contains("passage")) t.passage = joined(sections["passage"]);
  if (sections.contains("postamble")) t.postamble = joined(sections["postamble"]);
  validate(t);
  return t;
}

// Keeps the first max_words whitespace-separated words.
inline std::string truncate_words(std::string_view text, std::size_t max_words) {
  std::string out;
  std::size_t words = 0;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size() && words < max_words) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) {
      if (!out.empty()) out.push_back(' ');
      out.append(text.substr(start, i - start));
      ++words;
    }
  }
  return out;
}

// [system, user]; the user turn enumerates passages as [1], [2], ... in input
// order, each truncated to passage_words words.
inline std::vector<Message> build_prompt(std::string_view query, const std::vector<std::string>& passages,
                                         const PromptTemplate& tmpl = {}, std::size_t passage_words = 120) {
  if (passages.empty()) throw UsageError("build_prompt: empty passage list");
  const std::string m = std::to_string(passages.size());
  std::string user = detail::substitute(tmpl.preamble, {{"m", m}});
  for (std::size_t i = 0; i < passages.size(); ++i) {
    user += detail::substitute(tmpl.passage,
                               {{"index", std::to_string(i + 1)}, {"passage", truncate_words(passages[i], passage_words)}});
  }
  user += detail::substitute(tmpl.postamble, {{"m", m}, {"query", std::string(query)}});
  return {{"system", tmpl.system}, {"user", std::move(user)}};
}

// order[k] is the 1-based input position placed at rank k+1; ranks[i] is the
// rank of input position i+1.
struct Permutation {
  std::vector<int> order;
  std::vector<int> ranks;
  bool repaired = false;
};

inline std::vector<int> ranks_from_order(const std::vector<int>& order) {
  std::vector<int> ranks(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) ranks[static_cast<std::size_t>(order[k] - 1)] = static_cast<int>(k + 1);
  return ranks;
}

inline std::vector<int> order_from_ranks(const std::vector<int>& ranks) {
  std::vector<int> order(ranks.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) order[static_cast<std::size_t>(ranks[i] - 1)] = static_cast<int>(i + 1);
  return order;
}

// Total parser for "[2] > [1] > [3]"-style answers. Integers are read in
// textual order; out-of-range values and repeats are dropped, missing indices
// are appended ascending. Any such repair, or an answer without integers,
// sets `repaired`.
inline Permutation parse_permutation(std::string_view text, std::size_t m) {
  if (m < 1) throw UsageError("parse_permutation: m must be >= 1");
  Permutation p;
  std::vector<bool> seen(m + 1, false);
  bool found_any = false;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] < '0' || text[i] > '9') {
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < text.size() && text[i] >= '0' && text[i] <= '9') ++i;
    found_any = true;
    std::size_t value = 0;
    bool overflow = false;
    for (std::size_t k = start; k < i; ++k) {
      value = value * 10 + static_cast<std::size_t>(text[k] - '0');
      if (value > m) overflow = true;
    }
    if (overflow || value < 1 || value > m || seen[value]) {
      p.repaired = true;
      continue;
    }
    seen[value] = true;
    p.order.push_back(static_cast<int>(value));
  }
  if (!found_any) p.repaired = true;
  for (std::size_t v = 1; v <= m; ++v) {
    if (!seen[v]) {
      p.order.push_back(static_cast<int>(v));
      p.repaired = true;
    }
  }
  p.ranks = ranks_from_order(p.order);
  return p;
}

inline std::string format_permutation(const std::vector<int>& order) {
  std::string out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k) out += " > ";
    out += "[" + std::to_string(order[k]) + "]";
  }
  return out;
}

struct WindowResult {
  Permutation permutation;
  std::vector<std::string> responses;
  std::size_t calls = 0;
};

// Asks for one window. `window` holds the 1-based input positions currently
// occupying that slice of the list, top first; the answer ranks them as
// [1]..[window.size()].
using WindowAsk = std::function<std::string(std::span<const int> window)>;

// Sliding windows from the bottom of the list upward with stride `step`,
// each window's permutation applied in place. A window at least as long as
// the list makes exactly one call.
inline WindowResult window_rerank(std::size_t m, const WindowAsk& ask, WindowPlan plan) {
  if (plan.step < 1 || plan.step > plan.window || plan.window < 1) {
    throw UsageError("window plan must satisfy 1 <= step <= window");
  }
  WindowResult result;
  std::vector<int> current(m);
  std::iota(current.begin(), current.end(), 1);
  if (m == 0) return result;
  const std::size_t w = std::min(plan.window, m);
  auto end = static_cast<std::ptrdiff_t>(m);
  auto start = end - static_cast<std::ptrdiff_t>(w);
  while (start >= 0) {
    std::span<const int> window(current.data() + start, static_cast<std::size_t>(end - start));
    std::string text;
    try {
      text = ask(window);
    } catch (const TransportError& e) {
      throw TransportError("window [" + std::to_string(start) + ", " + std::to_string(end) + "): " + e.what());
    } catch (const BudgetError& e) {
      throw BudgetError("window [" + std::to_string(start) + ", " + std::to_string(end) + "): " + e.what());
    }
    ++result.calls;
    const auto local = parse_permutation(text, window.size());
    result.permutation.repaired = result.permutation.repaired || local.repaired;
    std::vector<int> reordered;
    reordered.reserve(window.size());
    for (int idx : local.order) reordered.push_back(window[static_cast<std::size_t>(idx - 1)]);
    std::copy(reordered.begin(), reordered.end(), current.begin() + start);
    result.responses.push_back(std::move(text));
    end -= static_cast<std::ptrdiff_t>(plan.step);
    start -= static_cast<std::ptrdiff_t>(plan.step);
  }
  result.permutation.order = current;
  result.permutation.ranks = ranks_from_order(current);
  return result;
}

// Offline teacher: answers with the window's indices by descending qrels
// grade, ties by position. Unjudged documents count as grade 0.
inline LlmFn mock_llm(Qrels qrels) {
  return [qrels = std::move(qrels)](const LlmRequest& req) {
    const auto qit = qrels.find(req.query_id);
    std::vector<int> grades(req.doc_ids.size(), 0);
    if (qit != qrels.end()) {
      for (std::size_t i = 0; i < req.doc_ids.size(); ++i) {
        const auto dit = qit->second.find(req.doc_ids[i]);
        if (dit != qit->second.end()) grades[i] = dit->second;
      }
    }
    std::vector<int> order(req.doc_ids.size());
    std::iota(order.begin(), order.end(), 1);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return grades[static_cast<std::size_t>(a - 1)] > grades[static_cast<std::size_t>(b - 1)]; });
    return format_permutation(order);
  };
}

// USD per 1K tokens.
struct TokenPrices {
  double prompt = 0.003;
  double completion = 0.004;
};

inline std::size_t estimate_tokens(std::size_t characters) { return (characters + 3) / 4; }

// Tokens are estimated as ceil(characters / 4) with characters counted as
// UTF-8 bytes; the expected completion is 6 characters per ranked index.
inline double estimate_cost(const std::vector<Message>& messages, const TokenPrices& prices,
                            std::size_t expected_entries = 0) {
  std::size_t chars = 0;
  for (const auto& msg : messages) chars += msg.content.size();
  const double prompt_tokens = static_cast<double>(estimate_tokens(chars));
  const double completion_tokens = static_cast<double>(estimate_tokens(6 * expected_entries));
  return prompt_tokens / 1000.0 * prices.prompt + completion_tokens / 1000.0 * prices.completion;
}

// Cost of a whole labeling job: one prompt per window with its entry count.
inline double estimate_cost(const std::vector<std::vector<Message>>& prompts, const std::vector<std::size_t>& entries,
                            const TokenPrices& prices) {
  double total = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    total += estimate_cost(prompts[i], prices, i < entries.size() ? entries[i] : 0);
  }
  return total;
}

}  // namespace distilrank
