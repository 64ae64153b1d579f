// distilrank: every pipeline stage as a subcommand, with file handoffs.
//
// Exit status: 0 ok, 1 usage, 2 data, 3 transport or budget.

#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "distilrank/distilrank.hpp"

namespace dr = distilrank;
namespace fs = std::filesystem;

namespace {

struct Command {
  CLI::App* app = nullptr;
  std::vector<CLI::Option*> required;
  std::function<void()> run;
};

std::deque<Command>& commands() {
  static std::deque<Command> all;
  return all;
}

Command& command(CLI::App* app) {
  commands().push_back({app, {}, {}});
  return commands().back();
}

CLI::Option* need(Command& c, CLI::Option* opt) {
  opt->description(opt->get_description() + " (required)");
  c.required.push_back(opt);
  return opt;
}

// "label=path" pairs from repeatable options.
std::map<std::string, std::string> labeled_paths(const std::vector<std::string>& items, const std::string& flag) {
  std::map<std::string, std::string> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size()) {
      throw dr::UsageError(flag + " expects label=path, got '" + item + "'");
    }
    if (!out.emplace(item.substr(0, eq), item.substr(eq + 1)).second) {
      throw dr::UsageError(flag + " repeats label " + item.substr(0, eq));
    }
  }
  return out;
}

std::vector<dr::Query> load_query_files(const std::vector<std::string>& paths) {
  std::vector<dr::Query> all;
  std::set<std::string> seen;
  for (const auto& p : paths) {
    for (auto& q : dr::load_queries(p)) {
      if (!seen.insert(q.query_id).second) throw dr::DataError(p + ": query_id " + q.query_id + " already loaded");
      all.push_back(std::move(q));
    }
  }
  return all;
}

template <typename F>
void write_file(const std::string& path, F&& body) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  auto out = dr::detail::open_output(path);
  body(out);
  out.flush();
  if (!out) throw dr::DataError("failed writing " + path);
}

dr::ScoreStrategy strategy_arg(const std::string& s) {
  const auto v = dr::parse_strategy(s);
  if (!v) throw dr::UsageError("unknown strategy '" + s + "' (softmax|single_logit|difference)");
  return *v;
}

std::optional<dr::Source> exclude_arg(const std::string& s) {
  if (s == "none") return std::nullopt;
  const auto v = dr::parse_source(s);
  if (!v) throw dr::UsageError("unknown source '" + s + "' (none|bm25|splade|dragon|monot5)");
  return *v;
}

dr::KindFilter kinds_arg(const std::string& s) {
  const auto v = dr::parse_kind_filter(s);
  if (!v) throw dr::UsageError("unknown query kind filter '" + s + "' (mixed|cropped|generated)");
  return *v;
}

void add_tokenizer(CLI::App* app, dr::TokenizerConfig& tok) {
  app->add_option("--tokenizer.lowercase", tok.lowercase, "Lowercase tokens");
  app->add_option("--tokenizer.min-length", tok.min_token_length, "Drop tokens shorter than this");
}

// Options shared by `train` and `ablate`.
struct TrainArgs {
  dr::TrainConfig config;
  std::string strategy = "difference";
  std::string kinds = "mixed";
  std::string exclude = "none";
  unsigned hash_bits = 18;
  std::size_t hidden = 64;
  std::size_t interaction_cap = 16;
  double init_scale = 0.05;
  dr::TokenizerConfig tokenizer;

  void add(CLI::App* app, bool grid_axes) {
    app->add_option("--train.epochs", config.epochs, "Passes over the training set");
    app->add_option("--train.batch", config.batch, "Queries per optimizer step");
    app->add_option("--train.lr", config.adam.lr, "Constant learning rate");
    app->add_option("--train.beta1", config.adam.beta1, "AdamW first-moment decay");
    app->add_option("--train.beta2", config.adam.beta2, "AdamW second-moment decay");
    app->add_option("--train.eps", config.adam.eps, "AdamW epsilon");
    app->add_option("--train.weight-decay", config.adam.weight_decay, "Decoupled weight decay");
    app->add_flag("--train.literal-sign", config.literal_sign,
                  "Use log(1+e^(s_i-s_j)) for r_i<r_j instead of the corrected RankNet term");
    if (grid_axes) {
      app->add_option("--train.docs", config.docs_per_sample, "Documents per training sample (M')");
      app->add_option("--train.strategy", strategy, "Score strategy: difference|single_logit|softmax");
      app->add_option("--train.kinds", kinds, "Training query kinds: mixed|cropped|generated");
      app->add_option("--train.exclude-source", exclude, "Drop examples from one source: none|bm25|splade|dragon|monot5");
    }
    app->add_option("--scorer.hash-bits", hash_bits, "Feature hash dimension is 2^bits");
    app->add_option("--scorer.hidden", hidden, "Hidden units");
    app->add_option("--scorer.interaction-cap", interaction_cap, "Query tokens crossed with document tokens");
    app->add_option("--scorer.init-scale", init_scale, "Std-dev of the initial first-layer weights");
    app->add_option("--scorer.lowercase", tokenizer.lowercase, "Lowercase tokens before hashing");
  }

  dr::TrainConfig resolved(std::uint64_t seed) const {
    auto c = config;
    c.seed = seed;
    c.strategy = strategy_arg(strategy);
    c.kinds = kinds_arg(kinds);
    c.exclude_source = exclude_arg(exclude);
    dr::validate(c);
    return c;
  }

  dr::FeatureConfig features() const {
    if (hash_bits < 1 || hash_bits > 28) throw dr::UsageError("scorer.hash-bits must be in 1..28");
    dr::FeatureConfig f;
    f.hash_dim = 1u << hash_bits;
    f.interaction_cap = interaction_cap;
    f.tokenizer = tokenizer;
    return f;
  }
};

void print_epoch(const dr::EpochStats& s) {
  std::fprintf(stderr, "epoch %zu\ttrain_loss %.6f\tval_loss %.6f\n", s.epoch, s.train_loss, s.val_loss);
}

std::vector<CLI::App*> selected_chain(CLI::App& root) {
  std::vector<CLI::App*> chain{&root};
  for (CLI::App* cur = &root;;) {
    const auto subs = cur->get_subcommands();
    if (subs.empty()) break;
    cur = subs.front();
    chain.push_back(cur);
  }
  return chain;
}

void collect_option_names(CLI::App* app, std::set<std::string>& names) {
  for (const auto* opt : app->get_options()) {
    for (const auto& n : opt->get_lnames()) names.insert(n);
  }
  for (auto* sub : app->get_subcommands([](CLI::App*) { return true; })) collect_option_names(sub, names);
}

// Fills options left unset on the command line from the config file. Keys
// must name some option of some subcommand; keys for other stages are
// ignored so one file can serve the whole pipeline.
void apply_config(CLI::App& root, const std::string& path) {
  const auto entries = dr::load_config(path);
  std::set<std::string> known;
  collect_option_names(&root, known);
  std::map<std::string, std::vector<dr::ConfigEntry>> by_key;
  for (const auto& e : entries) {
    if (!known.contains(e.key) || e.key == "config" || e.key == "help") {
      throw dr::UsageError(path + ": " + dr::detail::at_line(e.line, "unknown key '" + e.key + "'"));
    }
    by_key[e.key].push_back(e);
  }
  for (CLI::App* app : selected_chain(root)) {
    for (CLI::Option* opt : app->get_options()) {
      if (opt->count() > 0) continue;
      for (const auto& name : opt->get_lnames()) {
        const auto it = by_key.find(name);
        if (it == by_key.end()) continue;
        if (it->second.size() > 1 && opt->get_expected_max() <= 1) {
          throw dr::UsageError(path + ": " + dr::detail::at_line(it->second[1].line, "key '" + name + "' repeated"));
        }
        try {
          for (const auto& e : it->second) opt->add_result(e.value);
          opt->run_callback();
        } catch (const CLI::Error& err) {
          throw dr::UsageError(path + ": " + dr::detail::at_line(it->second.front().line, name + ": " + err.what()));
        }
        break;
      }
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distillation pipeline for passage reranking: retrieval pooling, permutation labeling by a teacher "
               "model, RankNet training of a compact reranker, and evaluation."};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  app.add_option("--config", config_path, "key = value file; command-line flags take precedence");
  app.add_option("--seed", seed, "Seed for every random choice");
  app.add_option("--threads", threads, "Worker threads where a stage can fan out");

  // ------------------------------------------------------------ synth
  dr::SynthConfig synth;
  std::string synth_dir;
  {
    auto* sub = app.add_subcommand("synth", "Write a seeded synthetic benchmark");
    auto& c = command(sub);
    need(c, sub->add_option("--out-dir", synth_dir, "Output directory"));
    sub->add_option("--synth.topics", synth.topics, "Topics");
    sub->add_option("--synth.docs", synth.docs, "Documents");
    sub->add_option("--synth.train", synth.train_queries, "Training queries");
    sub->add_option("--synth.eval", synth.eval_queries, "Evaluation queries");
    sub->add_option("--synth.negatives", synth.judged_negatives, "Off-topic documents judged 0 per query");
    c.run = [&] {
      auto cfg = synth;
      cfg.seed = seed;
      const auto b = dr::synth_benchmark(cfg);
      const fs::path dir(synth_dir);
      fs::create_directories(dir);
      write_file((dir / "corpus.jsonl").string(), [&](std::ostream& o) { dr::write_corpus(o, b.corpus); });
      write_file((dir / "train_queries.tsv").string(), [&](std::ostream& o) { dr::write_queries(o, b.train); });
      write_file((dir / "eval_queries.tsv").string(), [&](std::ostream& o) { dr::write_queries(o, b.eval); });
      write_file((dir / "qrels.txt").string(), [&](std::ostream& o) { dr::write_qrels(o, b.qrels); });
      for (const auto* part : {&b.train, &b.eval}) {
        dr::Qrels sub;
        for (const auto& q : *part) sub[q.query_id] = b.qrels.at(q.query_id);
        const char* name = part == &b.train ? "train_qrels.txt" : "eval_qrels.txt";
        write_file((dir / name).string(), [&](std::ostream& o) { dr::write_qrels(o, sub); });
      }
      write_file((dir / "generated_pool.tsv").string(), [&](std::ostream& o) {
        for (const auto& g : b.generated_pool) o << g.doc_id << '\t' << g.text << '\n';
      });
      std::printf("%zu documents, %zu train and %zu eval queries in %s\n", b.corpus.size(), b.train.size(),
                  b.eval.size(), synth_dir.c_str());
    };
  }

  // ------------------------------------------------------------ index build
  std::string index_corpus, index_out;
  dr::Bm25Params bm25;
  dr::TokenizerConfig index_tok;
  {
    auto* index = app.add_subcommand("index", "Inverted index operations");
    index->require_subcommand(1);
    auto* sub = index->add_subcommand("build", "Build a BM25 index from a corpus");
    auto& c = command(sub);
    need(c, sub->add_option("--corpus", index_corpus, "Corpus JSONL"));
    need(c, sub->add_option("--out", index_out, "Index file"));
    sub->add_option("--bm25.k1", bm25.k1, "BM25 k1");
    sub->add_option("--bm25.b", bm25.b, "BM25 b");
    add_tokenizer(sub, index_tok);
    c.run = [&] {
      const auto index = dr::build_index(dr::load_corpus(index_corpus), index_tok, bm25);
      write_file(index_out, [&](std::ostream& o) { dr::save_index(o, index); });
      std::printf("indexed %zu documents, %zu terms\n", index.size(), index.postings.size());
    };
  }

  // ------------------------------------------------------------ retrieve
  struct {
    std::string method = "bm25";
    std::vector<std::string> queries;
    std::string out, tag, index, corpus, doc_vectors, query_vectors, run_in, scores;
    std::size_t k = 30, k_pool = 100;
    dr::Bm25Params bm25;
    dr::TokenizerConfig tok;
  } ret;
  {
    auto* sub = app.add_subcommand("retrieve", "Produce a run from a first-stage method");
    auto& c = command(sub);
    sub->add_option("--method", ret.method, "bm25|dense|runfile|compose")
        ->check(CLI::IsMember({"bm25", "dense", "runfile", "compose"}));
    need(c, sub->add_option("--queries", ret.queries, "Query TSV (repeatable)"));
    need(c, sub->add_option("--out", ret.out, "Output run file"));
    sub->add_option("--k", ret.k, "Documents per query");
    sub->add_option("--tag", ret.tag, "Run tag (defaults to the method name)");
    sub->add_option("--index", ret.index, "bm25: index file");
    sub->add_option("--corpus", ret.corpus, "bm25: corpus to index on the fly when --index is absent");
    sub->add_option("--bm25.k1", ret.bm25.k1, "BM25 k1 for on-the-fly indexing");
    sub->add_option("--bm25.b", ret.bm25.b, "BM25 b for on-the-fly indexing");
    add_tokenizer(sub, ret.tok);
    sub->add_option("--doc-vectors", ret.doc_vectors, "dense: JSONL {doc_id, vector}");
    sub->add_option("--query-vectors", ret.query_vectors, "dense: JSONL {query_id, vector}");
    sub->add_option("--run-in", ret.run_in, "runfile/compose: input run");
    sub->add_option("--scores", ret.scores, "compose: TSV qid, docid, score from an external reranker");
    sub->add_option("--k-pool", ret.k_pool, "compose: base documents rescored per query");
    c.run = [&] {
      const auto queries = load_query_files(ret.queries);
      const std::string tag = ret.tag.empty() ? ret.method : ret.tag;
      dr::Run run;
      std::size_t missing = 0;
      if (ret.method == "bm25") {
        dr::InvertedIndex index;
        if (!ret.index.empty()) {
          auto in = dr::detail::open_input(ret.index);
          index = dr::load_index(in);
        } else if (!ret.corpus.empty()) {
          index = dr::build_index(dr::load_corpus(ret.corpus), ret.tok, ret.bm25);
        } else {
          throw dr::UsageError("retrieve --method bm25 needs --index or --corpus");
        }
        run = dr::retrieve_bm25_run(index, queries, ret.k, tag, threads);
        for (const auto& q : queries) missing += run.contains(q.query_id) ? 0 : 1;
      } else if (ret.method == "dense") {
        if (ret.doc_vectors.empty() || ret.query_vectors.empty()) {
          throw dr::UsageError("retrieve --method dense needs --doc-vectors and --query-vectors");
        }
        auto din = dr::detail::open_input(ret.doc_vectors);
        const auto docs = dr::read_dense_store(din, "doc_id");
        auto qin = dr::detail::open_input(ret.query_vectors);
        const auto qvecs = dr::read_dense_store(qin, "query_id");
        for (const auto& q : queries) {
          const auto it = qvecs.vectors.find(q.query_id);
          if (it == qvecs.vectors.end()) {
            ++missing;
            continue;
          }
          run[q.query_id] = dr::to_run_entries(q.query_id, dr::search_dense(docs, it->second, ret.k), tag);
        }
      } else if (ret.method == "runfile") {
        if (ret.run_in.empty()) throw dr::UsageError("retrieve --method runfile needs --run-in");
        const auto base = dr::load_run(ret.run_in);
        for (const auto& q : queries) {
          auto hits = dr::search_runfile(base, q.query_id, ret.k, &missing);
          if (!hits.empty()) run[q.query_id] = dr::to_run_entries(q.query_id, hits, tag);
        }
      } else {
        if (ret.run_in.empty() || ret.scores.empty()) throw dr::UsageError("retrieve --method compose needs --run-in and --scores");
        const auto base = dr::load_run(ret.run_in);
        auto sin = dr::detail::open_input(ret.scores);
        const auto scores = dr::read_score_map(sin);
        dr::Run subset;
        for (const auto& q : queries) {
          const auto it = base.find(q.query_id);
          if (it == base.end()) {
            ++missing;
          } else {
            subset.insert(*it);
          }
        }
        run = dr::compose_rerank(subset, scores, ret.k_pool, ret.k, tag);
      }
      write_file(ret.out, [&](std::ostream& o) { dr::write_run(o, run); });
      if (missing) std::fprintf(stderr, "warning: %zu queries produced no documents\n", missing);
      std::printf("wrote %zu queries to %s\n", run.size(), ret.out.c_str());
    };
  }

  // ------------------------------------------------------------ augment
  dr::CropConfig crop;
  std::string crop_corpus, crop_out, pool_path, gen_out;
  std::size_t gen_n = 10000;
  {
    auto* aug = app.add_subcommand("augment", "Build training queries");
    aug->require_subcommand(1);
    auto* sub = aug->add_subcommand("crop", "Sample corpus sentences as queries");
    auto& c = command(sub);
    need(c, sub->add_option("--corpus", crop_corpus, "Corpus JSONL"));
    need(c, sub->add_option("--out", crop_out, "Output query TSV"));
    sub->add_option("--crop.n", crop.n, "Queries to sample");
    sub->add_option("--crop.min", crop.min_tokens, "Minimum sentence length in tokens");
    sub->add_option("--crop.max", crop.max_tokens, "Maximum sentence length in tokens");
    add_tokenizer(sub, crop.tokenizer);
    c.run = [&] {
      auto cfg = crop;
      cfg.seed = seed;
      const auto r = dr::crop_sentences(dr::load_corpus(crop_corpus), cfg);
      if (r.with_replacement) {
        std::fprintf(stderr, "warning: only %zu eligible sentences for %zu queries; sampled with replacement\n",
                     r.eligible, cfg.n);
      }
      write_file(crop_out, [&](std::ostream& o) { dr::write_queries(o, r.queries); });
      std::printf("wrote %zu cropped queries (%zu eligible sentences)\n", r.queries.size(), r.eligible);
    };

    auto* gen = aug->add_subcommand("load-generated", "Sample queries from a generated-query pool");
    auto& g = command(gen);
    need(g, gen->add_option("--pool", pool_path, "TSV doc_id, query text"));
    need(g, gen->add_option("--out", gen_out, "Output query TSV"));
    gen->add_option("--generated.n", gen_n, "Queries to sample");
    g.run = [&] {
      const auto qs = dr::load_generated(pool_path, gen_n, seed);
      write_file(gen_out, [&](std::ostream& o) { dr::write_queries(o, qs); });
      std::printf("wrote %zu generated queries\n", qs.size());
    };
  }

  // ------------------------------------------------------------ assign-sources
  std::vector<std::string> assign_queries;
  std::string assign_out;
  {
    auto* sub = app.add_subcommand("assign-sources", "Deal queries evenly over the four retrieval sources per kind");
    auto& c = command(sub);
    need(c, sub->add_option("--queries", assign_queries, "Query TSV (repeatable)"));
    need(c, sub->add_option("--out", assign_out, "Output TSV query_id, source"));
    c.run = [&] {
      const auto qs = load_query_files(assign_queries);
      const auto a = dr::assign_sources(qs, seed);
      write_file(assign_out, [&](std::ostream& o) { dr::write_assignment(o, a); });
      std::map<std::string, std::size_t> counts;
      for (const auto& q : qs) counts[std::string(dr::to_string(q.kind)) + "/" + std::string(dr::to_string(a.at(q.query_id)))]++;
      for (const auto& [k, n] : counts) std::printf("%s\t%zu\n", k.c_str(), n);
    };
  }

  // ------------------------------------------------------------ distill
  struct {
    std::vector<std::string> queries, runs;
    std::string assignment, corpus, journal, out, backend = "http", qrels, prompt, log;
    dr::LlmConfig llm;
    long long base_delay_ms = 1000, max_delay_ms = 60000, timeout_s = 120;
    dr::DistillOptions options;
  } dist;
  {
    auto* sub = app.add_subcommand("distill", "Label pooled documents with the teacher and journal the results");
    auto& c = command(sub);
    need(c, sub->add_option("--queries", dist.queries, "Query TSV (repeatable)"));
    need(c, sub->add_option("--run", dist.runs, "source=run-file pool for a source (repeatable)"));
    sub->add_option("--assignment", dist.assignment, "TSV query_id, source; optional with a single --run");
    need(c, sub->add_option("--corpus", dist.corpus, "Corpus JSONL"));
    need(c, sub->add_option("--journal", dist.journal, "Append-only journal; rerunning resumes from it"));
    need(c, sub->add_option("--out", dist.out, "Output dataset JSONL"));
    sub->add_option("--llm.backend", dist.backend, "http|mock")->check(CLI::IsMember({"http", "mock"}));
    sub->add_option("--qrels", dist.qrels, "mock: graded judgments the mock teacher ranks by");
    sub->add_option("--llm.endpoint", dist.llm.endpoint, "Chat-completions URL");
    sub->add_option("--llm.model", dist.llm.model, "Model name");
    sub->add_option("--llm.temperature", dist.llm.temperature, "Sampling temperature");
    sub->add_option("--llm.max-in-flight", dist.options.max_in_flight, "Concurrent teacher requests");
    sub->add_option("--llm.budget-usd,--budget-usd", dist.llm.budget_usd, "Refuse requests past this estimated spend");
    sub->add_option("--llm.max-attempts", dist.llm.retry.max_attempts, "Attempts per request");
    sub->add_option("--llm.base-delay-ms", dist.base_delay_ms, "First retry backoff cap");
    sub->add_option("--llm.max-delay-ms", dist.max_delay_ms, "Largest retry backoff cap");
    sub->add_option("--llm.timeout-s", dist.timeout_s, "Per-request timeout");
    sub->add_option("--llm.prompt-price", dist.llm.prices.prompt, "USD per 1K prompt tokens");
    sub->add_option("--llm.completion-price", dist.llm.prices.completion, "USD per 1K completion tokens");
    sub->add_option("--llm.log", dist.log, "JSONL log of every request and response");
    sub->add_option("--distill.docs", dist.options.max_docs, "Pooled documents per query (M)");
    sub->add_option("--distill.window", dist.options.plan.window, "Sliding-window size");
    sub->add_option("--distill.step", dist.options.plan.step, "Sliding-window step");
    sub->add_option("--distill.passage-words", dist.options.passage_words, "Words kept per passage in the prompt");
    sub->add_option("--prompt", dist.prompt, "Prompt template file with @@system/@@preamble/@@passage/@@postamble");
    c.run = [&] {
      auto queries = load_query_files(dist.queries);
      const auto runs_by_label = labeled_paths(dist.runs, "--run");
      std::map<dr::Source, dr::Run> pools;
      for (const auto& [label, path] : runs_by_label) {
        const auto src = dr::parse_source(label);
        if (!src) throw dr::UsageError("--run label '" + label + "' is not a source (bm25|splade|dragon|monot5)");
        pools[*src] = dr::load_run(path);
      }
      dr::SourceAssignment assignment;
      if (!dist.assignment.empty()) {
        auto in = dr::detail::open_input(dist.assignment);
        try {
          assignment = dr::read_assignment(in);
        } catch (const dr::DataError& e) {
          throw dr::DataError(dist.assignment + ": " + e.what());
        }
      } else if (pools.size() == 1) {
        for (const auto& q : queries) assignment[q.query_id] = pools.begin()->first;
      } else {
        throw dr::UsageError("several --run sources given; --assignment is required");
      }
      for (const auto& q : queries) {
        const auto it = assignment.find(q.query_id);
        if (it == assignment.end()) throw dr::DataError("query " + q.query_id + " has no source assignment");
        if (!pools.contains(it->second)) {
          throw dr::UsageError("query " + q.query_id + " is assigned to " + std::string(dr::to_string(it->second)) +
                               " but no --run was given for it");
        }
      }
      const dr::DocTexts docs(dr::load_corpus(dist.corpus));
      if (!dist.prompt.empty()) {
        auto in = dr::detail::open_input(dist.prompt);
        dist.options.prompt = dr::read_prompt_template(in);
      }
      std::size_t missing = 0;
      dr::RetrieveFn retrieve = [&](const dr::Query& q) {
        dr::Retrieved r;
        r.source = assignment.at(q.query_id);
        for (const auto& hit : dr::search_runfile(pools.at(r.source), q.query_id, dist.options.max_docs, &missing)) {
          r.docs.push_back({hit.doc_id, docs.at(hit.doc_id)});
        }
        return r;
      };
      std::unique_ptr<dr::ChatClient> client;
      std::ofstream log;
      dr::LlmFn llm;
      if (dist.backend == "mock") {
        if (dist.qrels.empty()) throw dr::UsageError("--llm.backend mock needs --qrels");
        llm = dr::mock_llm(dr::load_qrels(dist.qrels));
      } else {
        auto cfg = dist.llm;
        cfg.max_in_flight = dist.options.max_in_flight;
        cfg.retry.base_delay = std::chrono::milliseconds(dist.base_delay_ms);
        cfg.retry.max_delay = std::chrono::milliseconds(dist.max_delay_ms);
        cfg.timeout = std::chrono::seconds(dist.timeout_s);
        cfg.api_key = dr::api_key_from_env();
        cfg.jitter_seed = seed;
        if (!dist.log.empty()) {
          log.open(dist.log, std::ios::app);
          if (!log) throw dr::DataError("cannot write " + dist.log);
        }
        client = std::make_unique<dr::ChatClient>(cfg, dist.log.empty() ? nullptr : &log);
        llm = client->as_llm();
      }
      const auto report = dr::distill(queries, retrieve, llm, dist.journal, dist.options);
      write_file(dist.out, [&](std::ostream& o) { dr::write_distilled(o, report.examples); });
      std::size_t repaired = 0;
      for (const auto& ex : report.examples) repaired += ex.repaired ? 1 : 0;
      std::printf("%zu examples (%zu resumed, %zu labeled, %zu teacher calls, %zu repaired)", report.examples.size(),
                  report.resumed, report.labeled, report.llm_calls, repaired);
      if (client) std::printf(", spent $%.4f", client->spent_usd());
      std::printf("\n");
      for (const auto& f : report.failures) std::fprintf(stderr, "failed %s: %s\n", f.query_id.c_str(), f.message.c_str());
      if (!report.failures.empty()) throw dr::TransportError(std::to_string(report.failures.size()) + " queries failed");
    };
  }

  // ------------------------------------------------------------ split
  std::string split_data, split_train, split_val;
  std::size_t n_val = 1000;
  {
    auto* sub = app.add_subcommand("split", "Hold out a kind-balanced validation set");
    auto& c = command(sub);
    need(c, sub->add_option("--data", split_data, "Dataset JSONL"));
    need(c, sub->add_option("--train-out", split_train, "Training JSONL"));
    need(c, sub->add_option("--val-out", split_val, "Validation JSONL"));
    sub->add_option("--split.val", n_val, "Validation size, half per query kind");
    c.run = [&] {
      const auto s = dr::split_dataset(dr::load_distilled(split_data), n_val, seed);
      write_file(split_train, [&](std::ostream& o) { dr::write_distilled(o, s.train); });
      write_file(split_val, [&](std::ostream& o) { dr::write_distilled(o, s.validation); });
      std::printf("train %zu, validation %zu\n", s.train.size(), s.validation.size());
    };
  }

  // ------------------------------------------------------------ train
  TrainArgs targs;
  std::string train_data, val_data, train_corpus, train_out, history_out, init_ckpt;
  {
    auto* sub = app.add_subcommand("train", "Fit the reranker to teacher permutations with RankNet");
    auto& c = command(sub);
    need(c, sub->add_option("--train", train_data, "Training JSONL"));
    sub->add_option("--val", val_data, "Validation JSONL");
    need(c, sub->add_option("--corpus", train_corpus, "Corpus JSONL"));
    need(c, sub->add_option("--out", train_out, "Checkpoint file"));
    sub->add_option("--history", history_out, "TSV of per-epoch losses");
    sub->add_option("--init", init_ckpt, "Start from this checkpoint instead of a fresh initialization");
    targs.add(sub, true);
    c.run = [&] {
      const auto cfg = targs.resolved(seed);
      const dr::DocTexts docs(dr::load_corpus(train_corpus));
      dr::ScorerParams init;
      if (!init_ckpt.empty()) {
        auto in = dr::detail::open_input(init_ckpt);
        init = dr::load_checkpoint(in).params;
      } else {
        init = dr::init_params(targs.features(), targs.hidden, dr::mix_seed(seed, 0x1417), targs.init_scale);
      }
      const auto val = val_data.empty() ? std::vector<dr::DistilledExample>{} : dr::load_distilled(val_data);
      const auto result = dr::fit(cfg, dr::load_distilled(train_data), val, docs, std::move(init), print_epoch);
      write_file(train_out, [&](std::ostream& o) { dr::save_checkpoint(o, result.params, cfg.strategy); });
      if (!history_out.empty()) {
        write_file(history_out, [&](std::ostream& o) { dr::write_history(o, result.history); });
      }
      std::printf("trained on %zu examples; loss %.6f -> %.6f\n", result.train_examples,
                  result.history.front().train_loss, result.history.back().train_loss);
    };
  }

  // ------------------------------------------------------------ rerank
  struct {
    std::string run, corpus, checkpoint, logits, strategy, out, tag = "rerank";
    std::vector<std::string> queries;
    std::size_t k_in = 100, k_out = 0;
  } rr;
  {
    auto* sub = app.add_subcommand("rerank", "Rescore a run with a checkpoint or external logits");
    auto& c = command(sub);
    need(c, sub->add_option("--run", rr.run, "Run to rerank"));
    need(c, sub->add_option("--queries", rr.queries, "Query TSV (repeatable)"));
    sub->add_option("--corpus", rr.corpus, "Corpus JSONL (needed with --checkpoint)");
    sub->add_option("--checkpoint", rr.checkpoint, "Trained checkpoint");
    sub->add_option("--logits", rr.logits, "TSV qid, docid, z_true, z_false computed elsewhere");
    sub->add_option("--strategy", rr.strategy, "Override the score strategy: difference|single_logit|softmax");
    sub->add_option("--k-in", rr.k_in, "Documents rescored per query");
    sub->add_option("--k-out", rr.k_out, "Documents kept per query (0 keeps k-in)");
    need(c, sub->add_option("--out", rr.out, "Output run"));
    sub->add_option("--tag", rr.tag, "Run tag");
    c.run = [&] {
      if (rr.checkpoint.empty() == rr.logits.empty()) throw dr::UsageError("give exactly one of --checkpoint, --logits");
      const auto run = dr::load_run(rr.run);
      const auto qtexts = dr::query_text_map(load_query_files(rr.queries));
      dr::Run out;
      if (!rr.checkpoint.empty()) {
        if (rr.corpus.empty()) throw dr::UsageError("--checkpoint needs --corpus");
        auto in = dr::detail::open_input(rr.checkpoint);
        const auto ck = dr::load_checkpoint(in);
        const auto strategy = rr.strategy.empty() ? ck.strategy : strategy_arg(rr.strategy);
        const dr::DocTexts docs(dr::load_corpus(rr.corpus));
        out = dr::rerank_run(dr::model_scorer(ck.params, strategy), run, qtexts, docs, rr.k_in, rr.k_out, rr.tag,
                             threads);
      } else {
        const auto logits = dr::load_external_logits(rr.logits);
        const auto strategy = rr.strategy.empty() ? dr::ScoreStrategy::LogitDifference : strategy_arg(rr.strategy);
        // Texts are not consulted when scoring from logits.
        dr::DocTexts docs;
        if (!rr.corpus.empty()) docs = dr::DocTexts(dr::load_corpus(rr.corpus));
        std::vector<dr::Document> stub;
        if (rr.corpus.empty()) {
          std::set<std::string> ids;
          for (const auto& [qid, es] : run) {
            for (const auto& e : es) ids.insert(e.doc_id);
          }
          for (const auto& id : ids) stub.push_back({id, ""});
          docs = dr::DocTexts(stub);
        }
        out = dr::rerank_run(dr::logit_scorer(logits, strategy), run, qtexts, docs, rr.k_in, rr.k_out, rr.tag, threads);
      }
      write_file(rr.out, [&](std::ostream& o) { dr::write_run(o, out); });
      std::printf("reranked %zu queries\n", out.size());
    };
  }

  // ------------------------------------------------------------ eval
  std::string ev_run, ev_qrels, ev_per_query, ev_out, tt_a, tt_b;
  std::size_t ev_k = 10, ev_n = 30;
  std::vector<std::string> ev_runs, ev_queries;
  {
    auto* ev = app.add_subcommand("eval", "Evaluation");
    ev->require_subcommand(1);
    auto* nd = ev->add_subcommand("ndcg", "Mean nDCG@k of a run");
    auto& c = command(nd);
    need(c, nd->add_option("--run", ev_run, "Run file"));
    need(c, nd->add_option("--qrels", ev_qrels, "Qrels file"));
    nd->add_option("--k", ev_k, "Cutoff");
    nd->add_option("--per-query", ev_per_query, "TSV qid, ndcg");
    c.run = [&] {
      const auto report = dr::evaluate_run(dr::load_run(ev_run), dr::load_qrels(ev_qrels), ev_k);
      if (!ev_per_query.empty()) write_file(ev_per_query, [&](std::ostream& o) { dr::write_per_query(o, report.per_query); });
      std::printf("ndcg@%zu\t%.6f\tqueries\t%zu\n", report.k, report.mean, report.count);
    };

    auto* is = ev->add_subcommand("intersection", "Pairwise top-n intersection rate between sources");
    auto& ic = command(is);
    need(ic, is->add_option("--run", ev_runs, "label=run-file (repeat for each source)"));
    is->add_option("--n", ev_n, "Top-n cutoff");
    is->add_option("--queries", ev_queries,
                   "Query TSVs; when given, the upper triangle covers cropped and the lower generated queries");
    is->add_option("--out", ev_out, "Output TSV (stdout when absent)");
    ic.run = [&] {
      dr::RunSet runs;
      for (const auto& [label, path] : labeled_paths(ev_runs, "--run")) runs[label] = dr::load_run(path);
      auto emit = [&](auto&& body) {
        if (ev_out.empty()) {
          body(std::cout);
        } else {
          write_file(ev_out, body);
        }
      };
      if (ev_queries.empty()) {
        const auto m = dr::intersection_matrix(runs, ev_n);
        emit([&](std::ostream& o) { dr::write_intersection_tsv(o, m); });
        return;
      }
      std::map<dr::QueryKind, std::set<std::string>> ids;
      for (const auto& q : load_query_files(ev_queries)) ids[q.kind].insert(q.query_id);
      auto restrict = [&](dr::QueryKind kind) {
        dr::RunSet out;
        for (const auto& [label, run] : runs) {
          auto& r = out[label];
          for (const auto& [qid, es] : run) {
            if (ids[kind].contains(qid)) r[qid] = es;
          }
        }
        return out;
      };
      const auto upper = dr::intersection_matrix(restrict(dr::QueryKind::Cropped), ev_n);
      const auto lower = dr::intersection_matrix(restrict(dr::QueryKind::Generated), ev_n);
      emit([&](std::ostream& o) { dr::write_intersection_tsv(o, upper, &lower); });
    };

    auto* tt = ev->add_subcommand("ttest", "Two-sided paired t-test on per-query scores");
    auto& tc = command(tt);
    need(tc, tt->add_option("--a", tt_a, "Per-query TSV of system A"));
    need(tc, tt->add_option("--b", tt_b, "Per-query TSV of system B"));
    tc.run = [&] {
      auto ina = dr::detail::open_input(tt_a);
      auto inb = dr::detail::open_input(tt_b);
      const auto r = dr::paired_t_test(dr::read_per_query(ina), dr::read_per_query(inb));
      std::printf("mean_diff\t%.6f\tt\t%.6f\tdf\t%zu\tp\t%.6g\n", r.mean_diff, r.t, r.df, r.p);
    };
  }

  // ------------------------------------------------------------ ablate
  TrainArgs aargs;
  struct {
    std::string train, val, corpus, eval_run, qrels, out;
    std::vector<std::string> eval_queries;
    std::size_t k = 10, k_in = 100;
  } ab;
  {
    auto* sub = app.add_subcommand("ablate",
                                   "Train and evaluate over strategy x documents x query kind x left-out source");
    auto& c = command(sub);
    need(c, sub->add_option("--train", ab.train, "Training JSONL"));
    sub->add_option("--val", ab.val, "Validation JSONL");
    need(c, sub->add_option("--corpus", ab.corpus, "Corpus JSONL"));
    need(c, sub->add_option("--eval-run", ab.eval_run, "First-stage run to rerank"));
    need(c, sub->add_option("--eval-queries", ab.eval_queries, "Evaluation query TSV (repeatable)"));
    need(c, sub->add_option("--qrels", ab.qrels, "Evaluation qrels"));
    need(c, sub->add_option("--out", ab.out, "Output grid TSV"));
    sub->add_option("--k", ab.k, "nDCG cutoff");
    sub->add_option("--k-in", ab.k_in, "Documents reranked per query");
    aargs.add(sub, false);
    c.run = [&] {
      const dr::DocTexts docs(dr::load_corpus(ab.corpus));
      const auto train = dr::load_distilled(ab.train);
      const auto val = ab.val.empty() ? std::vector<dr::DistilledExample>{} : dr::load_distilled(ab.val);
      const auto run = dr::load_run(ab.eval_run);
      const auto qrels = dr::load_qrels(ab.qrels);
      const auto qtexts = dr::query_text_map(load_query_files(ab.eval_queries));
      const auto features = aargs.features();
      const auto init = dr::init_params(features, aargs.hidden, dr::mix_seed(seed, 0x1417), aargs.init_scale);
      std::vector<std::string> rows;
      for (auto strategy : {dr::ScoreStrategy::LogitDifference, dr::ScoreStrategy::SingleLogit}) {
        for (std::size_t m : {10, 20, 30}) {
          for (auto kinds : {dr::KindFilter::Mixed, dr::KindFilter::CroppedOnly, dr::KindFilter::GeneratedOnly}) {
            for (const char* ex : {"none", "bm25", "splade", "dragon", "monot5"}) {
              auto cfg = aargs.resolved(seed);
              cfg.strategy = strategy;
              cfg.docs_per_sample = m;
              cfg.kinds = kinds;
              cfg.exclude_source = exclude_arg(ex);
              const auto fitted = dr::fit(cfg, train, val, docs, init);
              const auto reranked =
                  dr::rerank_run(dr::model_scorer(fitted.params, strategy), run, qtexts, docs, ab.k_in, 0, "ablate",
                                 threads);
              const auto report = dr::evaluate_run(reranked, qrels, ab.k);
              char line[256];
              std::snprintf(line, sizeof line, "%s\t%zu\t%s\t%s\t%zu\t%.6f\t%.6f", std::string(dr::to_string(strategy)).c_str(),
                            m, std::string(dr::to_string(kinds)).c_str(), ex, fitted.train_examples,
                            fitted.history.back().train_loss, report.mean);
              rows.push_back(line);
              std::fprintf(stderr, "%s\n", line);
            }
          }
        }
      }
      write_file(ab.out, [&](std::ostream& o) {
        o << "strategy\tdocs\tquery_kind\texcluded_source\ttrain_examples\tfinal_train_loss\tndcg@" << ab.k << '\n';
        for (const auto& r : rows) o << r << '\n';
      });
      std::printf("wrote %zu cells to %s\n", rows.size(), ab.out.c_str());
    };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 1;
  }

  try {
    if (!config_path.empty()) apply_config(app, config_path);
    const auto chain = selected_chain(app);
    for (auto& c : commands()) {
      if (c.app != chain.back()) continue;
      for (const auto* opt : c.required) {
        if (opt->count() == 0) throw dr::UsageError(c.app->get_name() + ": " + opt->get_name() + " is required");
      }
      c.run();
      return 0;
    }
    std::cerr << chain.back()->help();
    return 1;
  } catch (const dr::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const dr::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const dr::TransportError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const dr::BudgetError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
