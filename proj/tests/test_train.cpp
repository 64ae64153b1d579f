#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "distilrank/rng.hpp"
#include "distilrank/train.hpp"
#include "test_util.hpp"

using namespace distilrank;

namespace {

std::vector<int> random_ranking(std::size_t m, Rng& rng) {
  std::vector<int> r(m);
  std::iota(r.begin(), r.end(), 1);
  rng.shuffle(std::span(r));
  return r;
}

// Small labeled set over a toy corpus where document "pN" mentions the query
// words and "nN" does not; the teacher ranks the p-documents first.
struct Toy {
  std::vector<Document> corpus;
  std::vector<DistilledExample> examples;
};

Toy toy(std::size_t queries, std::size_t docs_per_query) {
  Toy t;
  Rng rng(21);
  for (std::size_t q = 0; q < queries; ++q) {
    const std::string qid = "q" + std::to_string(q);
    const std::string word = "w" + std::to_string(q % 5);
    DistilledExample ex;
    ex.query_id = qid;
    ex.query_text = word + " topic";
    ex.kind = q % 2 ? QueryKind::Cropped : QueryKind::Generated;
    ex.source = kAllSources[q % 4];
    for (std::size_t d = 0; d < docs_per_query; ++d) {
      const bool rel = d % 2 == 0;
      const std::string id = qid + (rel ? "-p" : "-n") + std::to_string(d);
      std::string text = rel ? word + " " + word + " topic" : "filler";
      for (int k = 0; k < 3; ++k) text += " f" + std::to_string(rng.below(30));
      t.corpus.push_back({id, text});
      ex.doc_ids.push_back(id);
    }
    std::vector<int> ranks(docs_per_query);
    int next = 1;
    for (std::size_t d = 0; d < docs_per_query; d += 2) ranks[d] = next++;
    for (std::size_t d = 1; d < docs_per_query; d += 2) ranks[d] = next++;
    ex.llm_ranking = ranks;
    t.examples.push_back(ex);
  }
  return t;
}

FeatureConfig toy_features() {
  FeatureConfig f;
  f.hash_dim = 1u << 10;
  return f;
}

}  // namespace

TEST(RankNet, EqualScores) {
  const std::vector<double> s3(3, 0.25);
  const std::vector<int> r3{2, 3, 1};
  EXPECT_NEAR(ranknet_loss(s3, r3), 3 * std::log(2.0), 1e-12);
  Rng rng(1);
  const std::vector<double> s30(30, -4.0);
  const auto r30 = random_ranking(30, rng);
  EXPECT_NEAR(ranknet_loss(s30, r30) / (435 * std::log(2.0)), 1.0, 1e-9);
}

TEST(RankNet, TwoDocFixtures) {
  const std::vector<int> r{1, 2};
  EXPECT_NEAR(ranknet_loss(std::vector<double>{2.0, 0.0}, r), 0.126928, 1e-5);
  EXPECT_NEAR(ranknet_loss(std::vector<double>{2.0, 0.0}, r), std::log1p(std::exp(-2.0)), 1e-15);
  const double big = ranknet_loss(std::vector<double>{-50.0, 50.0}, r);
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 100.0, 1e-12);
  EXPECT_TRUE(std::isfinite(ranknet_loss(std::vector<double>{-1e6, 1e6}, r)));
}

TEST(RankNet, NonPermutationRejected) {
  EXPECT_THROW(ranknet_loss(std::vector<double>{1, 2}, std::vector<int>{1, 1}), DataError);
  EXPECT_THROW(ranknet_loss(std::vector<double>{1, 2}, std::vector<int>{1}), DataError);
  EXPECT_THROW(ranknet_grad(std::vector<double>{1, 2}, std::vector<int>{0, 1}), DataError);
}

TEST(RankNet, TranslationInvariant) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const std::size_t m = static_cast<std::size_t>(rng.between(2, 30));
    std::vector<double> s(m);
    for (auto& x : s) x = rng.normal();
    const auto r = random_ranking(m, rng);
    auto shifted = s;
    for (auto& x : shifted) x += 3.75;
    EXPECT_NEAR(ranknet_loss(shifted, r), ranknet_loss(s, r), 1e-9);
  }
}

TEST(RankNet, ConsistentOrderingBeatsInverted) {
  const std::vector<int> r{1, 2, 3, 4};
  double prev = ranknet_loss(std::vector<double>{0, 0, 0, 0}, r);
  for (double gap : {1.0, 2.0, 5.0, 20.0}) {
    const std::vector<double> good{3 * gap, 2 * gap, gap, 0};
    const std::vector<double> bad{0, gap, 2 * gap, 3 * gap};
    const double l = ranknet_loss(good, r);
    EXPECT_LT(l, prev);
    EXPECT_GT(ranknet_loss(bad, r), l);
    prev = l;
  }
  EXPECT_LT(prev, 1e-8);
}

TEST(RankNet, LiteralSignReversesPreference) {
  const std::vector<int> r{1, 2};
  const std::vector<double> s{2.0, 0.0};
  EXPECT_NEAR(ranknet_loss(s, r, true), std::log1p(std::exp(2.0)), 1e-12);
  const auto g = ranknet_grad(s, r, true);
  EXPECT_GT(g[0], 0.0);
  EXPECT_LT(g[1], 0.0);
}

TEST(RankNet, GradientHalfAtTie) {
  const auto g = ranknet_grad(std::vector<double>{0.0, 0.0}, std::vector<int>{1, 2});
  EXPECT_EQ(g, (std::vector<double>{-0.5, 0.5}));
}

TEST(RankNet, GradientSumsToZeroAndMatchesFiniteDifference) {
  Rng rng(4);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t m = static_cast<std::size_t>(rng.between(2, 30));
    std::vector<double> s(m);
    for (auto& x : s) x = 2 * rng.normal();
    const auto r = random_ranking(m, rng);
    for (bool literal : {false, true}) {
      const auto g = ranknet_grad(s, r, literal);
      EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 0.0, 1e-12);
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        auto up = s, down = s;
        up[k] += 1e-5;
        down[k] -= 1e-5;
        const double fd = (ranknet_loss(up, r, literal) - ranknet_loss(down, r, literal)) / 2e-5;
        num += (g[k] - fd) * (g[k] - fd);
        den += fd * fd;
      }
      EXPECT_LT(std::sqrt(num / den), 1e-6) << "instance " << inst;
    }
  }
}

TEST(AdamW, ZeroGradZeroDecayIsNoOp) {
  std::vector<double> p{1.0, -2.0, 0.5};
  const auto before = p;
  AdamState st;
  AdamWConfig c;
  c.weight_decay = 0.0;
  adamw_step(p, std::vector<double>(3, 0.0), st, c);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, FirstStepIsNormalizedGradient) {
  AdamWConfig c;
  c.weight_decay = 0.0;
  for (double g : {1e-3, -1e-3, 0.02, -3.0, 250.0}) {
    std::vector<double> p{0.0};
    AdamState st;
    adamw_step(p, std::vector<double>{g}, st, c);
    const double expected = -c.lr * g / (std::abs(g) + c.eps);
    EXPECT_NEAR(p[0], expected, 1e-15 * c.lr) << g;
    EXPECT_EQ(std::signbit(p[0]), !std::signbit(g));
  }
}

TEST(AdamW, DecoupledDecayUnderZeroGradient) {
  AdamWConfig c;
  c.weight_decay = 0.1;
  c.lr = 0.01;
  std::vector<double> p{2.0, -4.0};
  AdamState st;
  adamw_step(p, std::vector<double>(2, 0.0), st, c);
  EXPECT_EQ(p[0], 2.0 * (1.0 - 0.01 * 0.1));
  EXPECT_EQ(p[1], -4.0 * (1.0 - 0.01 * 0.1));
}

TEST(AdamW, SecondStepUsesBiasCorrectedMoments) {
  AdamWConfig c;
  c.weight_decay = 0.0;
  std::vector<double> p{0.0};
  AdamState st;
  adamw_step(p, std::vector<double>{1.0}, st, c);
  adamw_step(p, std::vector<double>{-1.0}, st, c);
  const double m = (0.9 * 0.1 * 1.0 + 0.1 * -1.0) / (1 - 0.81);
  const double v = (0.999 * 0.001 + 0.001) / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], -c.lr * 1.0 / (1.0 + 1e-8) - c.lr * m / (std::sqrt(v) + 1e-8), 1e-15);
}

TEST(AdamW, NonFiniteGradient) {
  std::vector<double> p{0.0};
  AdamState st;
  EXPECT_THROW(adamw_step(p, std::vector<double>{NAN}, st, {}), DataError);
}

TEST(Subsample, KeepPositionsReRanks) {
  const auto ex = make_example("q", {"a", "b", "c"}, {2, 3, 1});
  const auto kept = keep_positions(ex, {0, 2});
  EXPECT_EQ(kept.doc_ids, (std::vector<std::string>{"a", "c"}));
  EXPECT_EQ(kept.llm_ranking, (std::vector<int>{2, 1}));
}

TEST(Subsample, IdentityAtFullSize) {
  const auto ex = make_example("q", {"a", "b", "c"}, {2, 3, 1});
  EXPECT_EQ(subsample_docs(ex, 3, 9), ex);
}

TEST(Subsample, AlwaysAPermutationAndDeterministic) {
  Rng rng(6);
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back("d" + std::to_string(i));
  const auto ex = make_example("q", ids, random_ranking(30, rng));
  for (std::size_t m : {1, 10, 20, 29}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto s = subsample_docs(ex, m, seed);
      ASSERT_EQ(s.size(), m);
      EXPECT_TRUE(is_permutation_of_1_to_m(s.llm_ranking));
      EXPECT_EQ(s, subsample_docs(ex, m, seed));
      // Relative teacher order survives.
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const auto oi = std::find(ids.begin(), ids.end(), s.doc_ids[i]) - ids.begin();
          const auto oj = std::find(ids.begin(), ids.end(), s.doc_ids[j]) - ids.begin();
          EXPECT_EQ(s.llm_ranking[i] < s.llm_ranking[j], ex.llm_ranking[oi] < ex.llm_ranking[oj]);
        }
      }
    }
  }
}

TEST(Subsample, Errors) {
  const auto ex = make_example("q7", {"a", "b"}, {1, 2});
  expect_throw_containing<UsageError>([&] { subsample_docs(ex, 3, 0); }, {"q7", "3"});
  EXPECT_THROW(subsample_docs(ex, 0, 0), UsageError);
}

TEST(Backprop, BatchGradientMatchesFiniteDifference) {
  const auto t = toy(4, 6);
  const DocTexts docs(t.corpus);
  for (auto strategy : {ScoreStrategy::LogitDifference, ScoreStrategy::SoftmaxTrueFalse, ScoreStrategy::SingleLogit}) {
    const auto params = init_params(toy_features(), 8, 3, 0.3);
    const auto set = prepare_set(t.examples, docs, params.features, 30, 1);
    std::vector<const PreparedExample*> batch;
    for (const auto& ex : set) batch.push_back(&ex);
    std::vector<double> grad(params.data.size(), 0.0);
    batch_loss(params, batch, strategy, false, grad);

    // Sample coordinates from every tensor, favouring W1 rows that are used.
    std::vector<std::size_t> coords;
    Rng rng(8);
    for (const auto& ex : set) {
      for (const auto& x : ex.features) {
        for (const auto& f : x) {
          if (coords.size() < 90 && rng.unit() < 0.3) coords.push_back(f.index * params.hidden + rng.below(params.hidden));
        }
      }
    }
    for (std::size_t j = 0; j < params.hidden + 2 * params.hidden + 2; ++j) coords.push_back(params.w1_size() + j);
    ASSERT_GE(coords.size(), 100u);
    std::size_t checked = 0;
    for (auto c : coords) {
      auto q = params;
      const double h = 1e-5;
      q.data[c] = params.data[c] + h;
      const double up = batch_loss(q, batch, strategy, false);
      q.data[c] = params.data[c] - h;
      const double down = batch_loss(q, batch, strategy, false);
      const double fd = (up - down) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[c]), 1e-6});
      EXPECT_LT(std::abs(grad[c] - fd) / denom, 1e-4) << to_string(strategy) << " coordinate " << c;
      ++checked;
    }
    EXPECT_GE(checked, 100u);
  }
}

TEST(Fit, ZeroEpochsReturnsInitialParams) {
  const auto t = toy(6, 6);
  const DocTexts docs(t.corpus);
  const auto init = init_params(toy_features(), 8, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = fit(cfg, t.examples, {}, docs, init);
  EXPECT_EQ(r.params.data, init.data);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_TRUE(std::isnan(r.history[0].val_loss));
}

TEST(Fit, DeterministicAndLearns) {
  const auto t = toy(24, 8);
  const DocTexts docs(t.corpus);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch = 4;
  cfg.adam.lr = 0.01;
  const std::vector<DistilledExample> train(t.examples.begin(), t.examples.begin() + 20);
  const std::vector<DistilledExample> val(t.examples.begin() + 20, t.examples.end());
  const auto a = fit(cfg, train, val, docs, init_params(toy_features(), 8, 2));
  const auto b = fit(cfg, train, val, docs, init_params(toy_features(), 8, 2));
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.params.data, b.params.data);
  ASSERT_EQ(a.history.size(), 9u);
  EXPECT_LT(a.history.back().train_loss, a.history.front().train_loss);
  EXPECT_LT(a.history.back().val_loss, a.history.front().val_loss);
}

TEST(Fit, StrategiesDifferButStayFinite) {
  const auto t = toy(12, 6);
  const DocTexts docs(t.corpus);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 4;
  cfg.strategy = ScoreStrategy::LogitDifference;
  const auto diff = fit(cfg, t.examples, {}, docs, init_params(toy_features(), 8, 2));
  cfg.strategy = ScoreStrategy::SoftmaxTrueFalse;
  const auto soft = fit(cfg, t.examples, {}, docs, init_params(toy_features(), 8, 2));
  EXPECT_NE(diff.params.data, soft.params.data);
  for (const auto& row : soft.history) EXPECT_TRUE(std::isfinite(row.train_loss));
  for (const auto& row : diff.history) EXPECT_TRUE(std::isfinite(row.train_loss));
}

TEST(Fit, Filters) {
  const auto t = toy(8, 4);
  const DocTexts docs(t.corpus);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.kinds = KindFilter::CroppedOnly;
  EXPECT_EQ(fit(cfg, t.examples, {}, docs, init_params(toy_features(), 4, 1)).train_examples, 4u);
  cfg.kinds = KindFilter::Mixed;
  cfg.exclude_source = Source::BM25;
  EXPECT_EQ(fit(cfg, t.examples, {}, docs, init_params(toy_features(), 4, 1)).train_examples, 6u);
  cfg.docs_per_sample = 2;
  EXPECT_EQ(fit(cfg, t.examples, {}, docs, init_params(toy_features(), 4, 1)).train_examples, 6u);
  std::vector<DistilledExample> only_bm25;
  for (const auto& ex : t.examples) {
    if (ex.source == Source::BM25) only_bm25.push_back(ex);
  }
  expect_throw_containing<DataError>([&] { fit(cfg, only_bm25, {}, docs, init_params(toy_features(), 4, 1)); },
                                     {"no training examples"});
}

TEST(Fit, MissingDocumentNamesIt) {
  auto t = toy(2, 4);
  t.examples[1].doc_ids[2] = "ghost";
  const DocTexts docs(t.corpus);
  expect_throw_containing<DataError>([&] { fit({}, t.examples, {}, docs, init_params(toy_features(), 4, 1)); },
                                     {"ghost", "q1"});
}

TEST(Fit, DivergenceNamesEpochAndBatch) {
  const auto t = toy(4, 4);
  const DocTexts docs(t.corpus);
  const auto init = init_params(toy_features(), 4, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 1;
  cfg.adam.lr = 1e200;
  try {
    fit(cfg, t.examples, {}, docs, init);
    FAIL() << "expected divergence";
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 1"), std::string::npos) << what;
  }
}

TEST(Fit, ConfigValidation) {
  TrainConfig cfg;
  cfg.adam.lr = 0.0;
  EXPECT_THROW(validate(cfg), UsageError);
  cfg = {};
  cfg.docs_per_sample = 31;
  EXPECT_THROW(validate(cfg), UsageError);
  cfg = {};
  cfg.batch = 0;
  EXPECT_THROW(validate(cfg), UsageError);
  EXPECT_EQ(parse_kind_filter("generated"), KindFilter::GeneratedOnly);
  EXPECT_FALSE(parse_kind_filter("all").has_value());
}

TEST(History, Tsv) {
  std::ostringstream out;
  write_history(out, {{0, 2.5, NAN}, {1, 1.25, 0.5}});
  EXPECT_EQ(out.str(), "epoch\ttrain_loss\tval_loss\n0\t2.500000\tnan\n1\t1.250000\t0.500000\n");
}
