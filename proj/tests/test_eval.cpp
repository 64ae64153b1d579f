#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "distilrank/eval.hpp"
#include "distilrank/llm.hpp"
#include "distilrank/retrieval.hpp"
#include "distilrank/rng.hpp"
#include "distilrank/synth.hpp"
#include "test_util.hpp"

using namespace distilrank;

namespace {

distilrank::Run make_run(const std::map<std::string, std::vector<std::string>>& lists) {
  distilrank::Run run;
  for (const auto& [qid, ids] : lists) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      run[qid].push_back({qid, ids[i], static_cast<int>(i + 1), static_cast<double>(ids.size() - i), "t"});
    }
  }
  return run;
}

std::vector<std::string> range_ids(const std::string& prefix, int from, int to) {
  std::vector<std::string> out;
  for (int i = from; i < to; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

}  // namespace

TEST(Ndcg, HandFixture) {
  const std::map<std::string, int> grades{{"d1", 3}, {"d2", 2}, {"d3", 0}};
  const double dcg = 3.0 + 7.0 / std::log2(3.0);
  const double idcg = 7.0 + 3.0 / std::log2(3.0);
  EXPECT_NEAR(dcg, 7.416508, 1e-6);
  EXPECT_NEAR(idcg, 8.892789, 1e-6);
  EXPECT_NEAR(ndcg_at_k({"d2", "d1", "d3"}, grades, 3), 0.834009, 1e-4);
  EXPECT_DOUBLE_EQ(ndcg_at_k({"d2", "d1", "d3"}, grades, 3), dcg / idcg);
}

TEST(Ndcg, IdealIsExactlyOne) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::map<std::string, int> grades;
    std::vector<std::pair<int, std::string>> docs;
    for (int i = 0; i < 20; ++i) {
      const int g = static_cast<int>(rng.below(4));
      grades["d" + std::to_string(i)] = g;
      docs.push_back({-g, "d" + std::to_string(i)});
    }
    grades["d0"] = 2;
    docs[0].first = -2;
    std::sort(docs.begin(), docs.end());
    std::vector<std::string> ranked;
    for (const auto& [g, id] : docs) ranked.push_back(id);
    EXPECT_EQ(ndcg_at_k(ranked, grades, 10), 1.0);
  }
}

TEST(Ndcg, NoPositiveGradeScoresZero) {
  EXPECT_EQ(ndcg_at_k({"a", "b"}, {{"a", 0}, {"b", 0}}, 10), 0.0);
  EXPECT_EQ(ndcg_at_k({"a"}, {}, 10), 0.0);
}

TEST(Ndcg, IdealCountsUnretrievedJudgedDocs) {
  EXPECT_LT(ndcg_at_k({"a"}, {{"a", 1}, {"b", 1}}, 10), 1.0);
  EXPECT_THROW(ndcg_at_k({"a"}, {{"a", 1}}, 0), UsageError);
}

TEST(Ndcg, BelowCutoffPermutationInvariant) {
  const std::map<std::string, int> grades{{"a", 1}, {"b", 3}, {"c", 2}, {"d", 1}};
  EXPECT_EQ(ndcg_at_k({"b", "a", "c", "d"}, grades, 2), ndcg_at_k({"b", "a", "d", "c"}, grades, 2));
}

TEST(Evaluate, MeanAndMissingQueries) {
  Qrels qrels;
  qrels["q1"] = {{"a", 1}};
  qrels["q2"] = {{"a", 1}, {"b", 1}};
  qrels["q3"] = {{"a", 2}};
  const auto run = make_run({{"q1", {"a"}}, {"q2", {"b", "x", "a"}}, {"q9", {"a"}}});
  const auto r = evaluate_run(run, qrels, 10);
  EXPECT_EQ(r.count, 3u);
  EXPECT_EQ(r.per_query.at("q1"), 1.0);
  EXPECT_EQ(r.per_query.at("q3"), 0.0);
  EXPECT_FALSE(r.per_query.contains("q9"));
  EXPECT_DOUBLE_EQ(r.mean, (1.0 + r.per_query.at("q2")) / 3.0);
}

TEST(Evaluate, OneAndHalfAverage) {
  Qrels qrels;
  qrels["q1"] = {{"a", 1}};
  qrels["q2"] = {{"a", 1}};
  // q2's only relevant doc sits at rank 3: 1/log2(4) = 0.5.
  const auto run = make_run({{"q1", {"a"}}, {"q2", {"x", "y", "a"}}});
  EXPECT_DOUBLE_EQ(evaluate_run(run, qrels, 10).mean, 0.75);
}

TEST(Evaluate, PerQueryTsvRoundTrip) {
  std::stringstream buf;
  write_per_query(buf, {{"q1", 0.5}, {"q2", 1.0}});
  EXPECT_EQ(buf.str(), "q1\t0.500000\nq2\t1.000000\n");
  EXPECT_EQ(read_per_query(buf), (std::map<std::string, double>{{"q1", 0.5}, {"q2", 1.0}}));
}

TEST(Intersection, IdenticalDisjointHalf) {
  const auto a = make_run({{"q1", range_ids("d", 0, 30)}, {"q2", range_ids("e", 0, 30)}});
  const auto b = make_run({{"q1", range_ids("x", 0, 30)}, {"q2", range_ids("y", 0, 30)}});
  auto half = range_ids("d", 15, 30);
  for (auto& id : range_ids("z", 0, 15)) half.push_back(id);
  const auto c = make_run({{"q1", half}});
  EXPECT_EQ(intersection_rate(a, a), 1.0);
  EXPECT_EQ(intersection_rate(a, b), 0.0);
  EXPECT_EQ(intersection_rate(a, c), 0.5);
  EXPECT_EQ(intersection_rate(c, a), 0.5);
}

TEST(Intersection, OnlyTopNCounts) {
  const auto a = make_run({{"q", range_ids("d", 0, 40)}});
  auto ids = range_ids("d", 30, 40);
  for (auto& id : range_ids("d", 0, 30)) ids.push_back(id);
  const auto b = make_run({{"q", ids}});
  EXPECT_DOUBLE_EQ(intersection_rate(a, b, 30), 20.0 / 30.0);
}

TEST(Intersection, Symmetric) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::map<std::string, std::vector<std::string>> la, lb;
    for (int q = 0; q < 5; ++q) {
      for (int i = 0; i < 30; ++i) {
        la["q" + std::to_string(q)].push_back("d" + std::to_string(rng.below(1000)) + "_" + std::to_string(i));
        lb["q" + std::to_string(q)].push_back("d" + std::to_string(rng.below(1000)) + "_" + std::to_string(i));
      }
    }
    const auto a = make_run(la), b = make_run(lb);
    EXPECT_EQ(intersection_rate(a, b), intersection_rate(b, a));
  }
}

TEST(Intersection, NoSharedQueries) {
  const auto a = make_run({{"q1", {"a"}}});
  const auto b = make_run({{"q2", {"a"}}});
  EXPECT_THROW(intersection_rate(a, b), DataError);
}

TEST(Intersection, FourSourceMatrix) {
  RunSet runs;
  runs["bm25"] = make_run({{"q", range_ids("d", 0, 30)}});
  runs["splade"] = make_run({{"q", range_ids("d", 10, 40)}});
  runs["dragon"] = make_run({{"q", range_ids("d", 20, 50)}});
  runs["monot5"] = make_run({{"q", range_ids("d", 0, 30)}});
  const auto m = intersection_matrix(runs);
  ASSERT_EQ(m.labels.size(), 4u);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(std::isnan(m.values[i][i]));
    for (std::size_t j = 0; j < 4; ++j) {
      if (i != j) {
        EXPECT_EQ(m.values[i][j], m.values[j][i]);
      }
      if (i < j) ++pairs;
    }
  }
  EXPECT_EQ(pairs, 6u);
  std::ostringstream out;
  write_intersection_tsv(out, m);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "source\tbm25\tdragon\tmonot5\tsplade");
  EXPECT_NE(out.str().find("bm25\t-\t33.3\t100.0\t66.7\n"), std::string::npos) << out.str();
}

TEST(Intersection, TwoKindLayout) {
  RunSet cropped, generated;
  cropped["a"] = make_run({{"q", range_ids("d", 0, 30)}});
  cropped["b"] = make_run({{"q", range_ids("d", 15, 45)}});
  generated["a"] = make_run({{"q", range_ids("d", 0, 30)}});
  generated["b"] = make_run({{"q", range_ids("d", 0, 30)}});
  const auto up = intersection_matrix(cropped);
  const auto low = intersection_matrix(generated);
  std::ostringstream out;
  write_intersection_tsv(out, up, &low);
  EXPECT_EQ(out.str(), "source\ta\tb\na\t-\t50.0\nb\t100.0\t-\n");
  EXPECT_THROW(intersection_matrix({{"a", cropped["a"]}}), UsageError);
}

TEST(TTest, KnownDifferences) {
  // Reference values from scipy.stats.ttest_rel on differences 1..5.
  std::map<std::string, double> a, b;
  for (int i = 1; i <= 5; ++i) {
    a["q" + std::to_string(i)] = i;
    b["q" + std::to_string(i)] = 0.0;
  }
  const auto r = paired_t_test(a, b);
  EXPECT_NEAR(r.t, 4.242640687119285, 1e-12);
  EXPECT_EQ(r.df, 4u);
  EXPECT_NEAR(r.p, 0.013235599563682695, 1e-12);
  const auto flipped = paired_t_test(b, a);
  EXPECT_NEAR(flipped.t, -r.t, 1e-12);
  EXPECT_NEAR(flipped.p, r.p, 1e-15);
}

TEST(TTest, IdenticalScoresGiveOne) {
  Rng rng(1);
  std::map<std::string, double> a;
  for (int i = 0; i < 10; ++i) a["q" + std::to_string(i)] = rng.unit();
  EXPECT_EQ(paired_t_test(a, a).p, 1.0);
}

TEST(TTest, Errors) {
  const std::map<std::string, double> a{{"q1", 0.1}, {"q2", 0.2}};
  const std::map<std::string, double> b{{"q1", 0.1}, {"q3", 0.2}};
  expect_throw_containing<DataError>([&] { paired_t_test(a, b); }, {"q2"});
  EXPECT_THROW(paired_t_test({{"q1", 1.0}}, {{"q1", 0.0}}), DataError);
}

TEST(Rerank, EqualScoresFallBackToDocId) {
  const DocTexts docs({{"c", "x"}, {"a", "x"}, {"b", "x"}});
  const auto run = make_run({{"q", {"c", "a", "b"}}});
  const auto flat = [](const std::string&, const std::string&, const std::string&, const std::string&) { return 1.0; };
  const auto out = rerank_run(flat, run, {{"q", "query"}}, docs);
  EXPECT_EQ(ranked_ids(out.at("q")), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(out.at("q")[0].rank, 1);
  EXPECT_EQ(out.at("q")[0].tag, "rerank");
}

TEST(Rerank, OracleLogitsAreIdeal) {
  SynthConfig cfg;
  cfg.docs = 160;
  cfg.train_queries = 0;
  cfg.eval_queries = 8;
  const auto bench = synth_benchmark(cfg);
  distilrank::Run run;
  LogitMap logits;
  for (const auto& [qid, grades] : bench.qrels) {
    int rank = 1;
    for (const auto& [doc, g] : grades) {
      run[qid].push_back({qid, doc, rank, -static_cast<double>(rank), "pool"});
      ++rank;
      logits[qid][doc] = {static_cast<double>(g), 0.0};
    }
  }
  const auto out = rerank_run(logit_scorer(logits, ScoreStrategy::LogitDifference), run, query_text_map(bench.eval),
                              DocTexts(bench.corpus), 1000);
  EXPECT_EQ(evaluate_run(out, bench.qrels, 10).mean, 1.0);
}

TEST(Rerank, SoftmaxAndDifferenceAgree) {
  const auto bench = synth_benchmark({});
  const auto idx = build_index(bench.corpus);
  const auto run = retrieve_bm25_run(idx, bench.eval, 30);
  FeatureConfig f;
  f.hash_dim = 1u << 12;
  const auto params = init_params(f, 16, 4, 0.2);
  const DocTexts docs(bench.corpus);
  const auto qt = query_text_map(bench.eval);
  const auto soft = rerank_run(model_scorer(params, ScoreStrategy::SoftmaxTrueFalse), run, qt, docs, 30);
  const auto diff = rerank_run(model_scorer(params, ScoreStrategy::LogitDifference), run, qt, docs, 30);
  for (const auto& [qid, entries] : soft) EXPECT_EQ(ranked_ids(entries), ranked_ids(diff.at(qid))) << qid;
}

TEST(Rerank, TruncatesAndIsThreadIndependent) {
  const auto bench = synth_benchmark({});
  const auto run = retrieve_bm25_run(build_index(bench.corpus), bench.eval, 30);
  FeatureConfig f;
  f.hash_dim = 1u << 12;
  const auto params = init_params(f, 8, 4);
  const DocTexts docs(bench.corpus);
  const auto qt = query_text_map(bench.eval);
  const auto scorer = model_scorer(params, ScoreStrategy::LogitDifference);
  const auto one = rerank_run(scorer, run, qt, docs, 20, 10, "m", 1);
  const auto four = rerank_run(scorer, run, qt, docs, 20, 10, "m", 4);
  EXPECT_EQ(one, four);
  for (const auto& [qid, entries] : one) {
    EXPECT_EQ(entries.size(), 10u);
    // Every kept document came from the base top 20.
    const auto base = ranked_ids(run.at(qid));
    for (const auto& e : entries) EXPECT_LT(std::find(base.begin(), base.end(), e.doc_id) - base.begin(), 20);
  }
}

TEST(Rerank, MissingDocumentNamed) {
  const DocTexts docs(std::vector<Document>{{"a", "x"}});
  const auto run = make_run({{"q", {"a", "ghost"}}});
  const auto flat = [](const std::string&, const std::string&, const std::string&, const std::string&) { return 1.0; };
  expect_throw_containing<DataError>([&] { rerank_run(flat, run, {{"q", "t"}}, docs); }, {"ghost"});
  expect_throw_containing<DataError>([&] { rerank_run(flat, run, {{"q", "t"}}, docs, 100, 0, "r", 2); }, {"ghost"});
}

TEST(Synth, DeterministicPerSeed) {
  const auto a = synth_benchmark({});
  const auto b = synth_benchmark({});
  EXPECT_EQ(a.corpus, b.corpus);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.eval, b.eval);
  EXPECT_EQ(a.qrels, b.qrels);
  SynthConfig other;
  other.seed = 8;
  EXPECT_NE(synth_benchmark(other).corpus, a.corpus);
}

TEST(Synth, Shape) {
  const auto b = synth_benchmark({});
  EXPECT_EQ(b.corpus.size(), 400u);
  EXPECT_EQ(b.train.size(), 64u);
  EXPECT_EQ(b.eval.size(), 16u);
  EXPECT_EQ(b.generated_pool.size(), 400u);
  EXPECT_EQ(b.train.front().query_id, "train-001");
  EXPECT_EQ(b.eval.back().query_id, "eval-016");
  std::size_t cropped = 0;
  for (const auto& q : b.train) cropped += q.kind == QueryKind::Cropped;
  EXPECT_EQ(cropped, 32u);
}

TEST(Synth, EveryQueryHasAPositive) {
  const auto b = synth_benchmark({});
  for (const auto& q : b.train) {
    const auto& g = b.qrels.at(q.query_id);
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](const auto& kv) { return kv.second > 0; })) << q.query_id;
  }
  for (const auto& q : b.eval) EXPECT_TRUE(b.qrels.contains(q.query_id));
}

TEST(Synth, MockTeacherIsPerfectOnEvalPool) {
  const auto b = synth_benchmark({});
  const auto llm = mock_llm(b.qrels);
  distilrank::Run run;
  for (const auto& q : b.eval) {
    std::vector<std::string> ids;
    for (const auto& [doc, g] : b.qrels.at(q.query_id)) ids.push_back(doc);
    const auto p = parse_permutation(llm({q.query_id, ids, {}}), ids.size());
    EXPECT_FALSE(p.repaired);
    for (std::size_t k = 0; k < p.order.size(); ++k) {
      run[q.query_id].push_back({q.query_id, ids[static_cast<std::size_t>(p.order[k] - 1)], static_cast<int>(k + 1),
                                  -static_cast<double>(k), "mock"});
    }
  }
  Qrels eval_qrels;
  for (const auto& q : b.eval) eval_qrels[q.query_id] = b.qrels.at(q.query_id);
  EXPECT_EQ(evaluate_run(run, eval_qrels, 10).mean, 1.0);
}

TEST(Synth, GradeFormula) {
  EXPECT_EQ(synth_grade(3), 1);
  EXPECT_EQ(synth_grade(4), 2);
  EXPECT_EQ(synth_grade(5), 2);
  EXPECT_EQ(synth_grade(6), 3);
  EXPECT_EQ(synth_grade(8), 3);
}

TEST(Synth, Preconditions) {
  SynthConfig c;
  c.topics = 1;
  EXPECT_THROW(synth_benchmark(c), UsageError);
  c = {};
  c.docs = 79;
  EXPECT_THROW(synth_benchmark(c), UsageError);
}
