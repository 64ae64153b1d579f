#pragma once

// RankNet over teacher permutations, AdamW, and the training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/rng.hpp"
#include "distilrank/scorer.hpp"
#include "distilrank/types.hpp"

namespace distilrank {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

namespace detail {

inline void require_ranking(std::span<const double> scores, std::span<const int> ranking) {
  if (scores.size() != ranking.size()) {
    throw DataError("ranknet: " + std::to_string(scores.size()) + " scores but " + std::to_string(ranking.size()) +
                    " ranks");
  }
  if (!is_permutation_of_1_to_m(std::vector<int>(ranking.begin(), ranking.end()))) {
    throw DataError("ranknet: ranking is not a permutation of 1.." + std::to_string(ranking.size()));
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw DataError("ranknet: non-finite score");
  }
}

}  // namespace detail

// Sum over pairs with r_i < r_j of log(1 + e^(s_j - s_i)). With `literal`,
// the pair term is log(1 + e^(s_i - s_j)) instead, which rewards ranking the
// teacher's preferred passage lower; kept only for comparison.
inline double ranknet_loss(std::span<const double> scores, std::span<const int> ranking, bool literal = false) {
  detail::require_ranking(scores, ranking);
  double loss = 0.0;
  const std::size_t m = scores.size();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (ranking[i] < ranking[j]) loss += softplus(literal ? scores[i] - scores[j] : scores[j] - scores[i]);
    }
  }
  return loss;
}

inline std::vector<double> ranknet_grad(std::span<const double> scores, std::span<const int> ranking,
                                        bool literal = false) {
  detail::require_ranking(scores, ranking);
  const std::size_t m = scores.size();
  std::vector<double> g(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (ranking[i] >= ranking[j]) continue;
      if (literal) {
        const double p = sigmoid(scores[i] - scores[j]);
        g[i] += p;
        g[j] -= p;
      } else {
        const double p = sigmoid(scores[j] - scores[i]);
        g[i] -= p;
        g[j] += p;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------- AdamW

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// Decoupled decay first (theta *= 1 - lr*lambda), then the bias-corrected
// Adam update.
inline void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                       const AdamWConfig& c) {
  if (grads.size() != params.size()) throw UsageError("adamw: gradient and parameter sizes differ");
  if (state.m.size() != params.size()) state = AdamState(params.size());
  for (double g : grads) {
    if (!std::isfinite(g)) throw DataError("adamw: non-finite gradient");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - c.lr * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    params[i] *= decay;
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

// ---------------------------------------------------------------- sampling

// Keeps the given 0-based positions (any order) and re-ranks the survivors
// 1..k preserving their relative teacher order.
inline DistilledExample keep_positions(const DistilledExample& ex, std::vector<std::size_t> positions) {
  std::sort(positions.begin(), positions.end());
  if (std::adjacent_find(positions.begin(), positions.end()) != positions.end()) {
    throw UsageError("keep_positions: duplicate position");
  }
  DistilledExample out = ex;
  out.doc_ids.clear();
  out.llm_ranking.clear();
  std::vector<int> old_ranks;
  for (auto p : positions) {
    if (p >= ex.size()) throw UsageError("keep_positions: position out of range");
    out.doc_ids.push_back(ex.doc_ids[p]);
    old_ranks.push_back(ex.llm_ranking[p]);
  }
  std::vector<std::size_t> by_rank(old_ranks.size());
  std::iota(by_rank.begin(), by_rank.end(), 0);
  std::sort(by_rank.begin(), by_rank.end(), [&](std::size_t a, std::size_t b) { return old_ranks[a] < old_ranks[b]; });
  out.llm_ranking.assign(old_ranks.size(), 0);
  for (std::size_t r = 0; r < by_rank.size(); ++r) out.llm_ranking[by_rank[r]] = static_cast<int>(r + 1);
  return out;
}

// Uniformly samples m_prime positions without replacement.
inline DistilledExample subsample_docs(const DistilledExample& ex, std::size_t m_prime, std::uint64_t seed) {
  if (m_prime == 0) throw UsageError("subsample_docs: M' must be >= 1");
  if (m_prime > ex.size()) {
    throw UsageError("subsample_docs: M'=" + std::to_string(m_prime) + " exceeds M=" + std::to_string(ex.size()) +
                     " for query " + ex.query_id);
  }
  if (m_prime == ex.size()) return ex;
  std::vector<std::size_t> order(ex.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < m_prime; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  order.resize(m_prime);
  return keep_positions(ex, std::move(order));
}

// ---------------------------------------------------------------- training

enum class KindFilter { Mixed, CroppedOnly, GeneratedOnly };

inline constexpr std::string_view to_string(KindFilter k) {
  switch (k) {
    case KindFilter::Mixed: return "mixed";
    case KindFilter::CroppedOnly: return "cropped";
    case KindFilter::GeneratedOnly: return "generated";
  }
  return "mixed";
}

inline std::optional<KindFilter> parse_kind_filter(std::string_view s) {
  for (auto k : {KindFilter::Mixed, KindFilter::CroppedOnly, KindFilter::GeneratedOnly}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

struct TrainConfig {
  std::size_t batch = 32;
  std::size_t docs_per_sample = 30;
  AdamWConfig adam;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  ScoreStrategy strategy = ScoreStrategy::LogitDifference;
  KindFilter kinds = KindFilter::Mixed;
  std::optional<Source> exclude_source;
  bool literal_sign = false;
};

inline void validate(const TrainConfig& c) {
  if (!(c.adam.lr > 0.0)) throw UsageError("train.lr must be > 0");
  if (c.batch < 1) throw UsageError("train.batch must be >= 1");
  if (c.docs_per_sample < 1 || c.docs_per_sample > 30) throw UsageError("train.docs must be in 1..30");
  if (!(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0) || !(c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0)) {
    throw UsageError("adam betas must be in [0, 1)");
  }
  if (!(c.adam.eps >= 0.0) || !(c.adam.weight_decay >= 0.0)) throw UsageError("adam eps and weight decay must be >= 0");
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;

  bool operator==(const EpochStats&) const = default;
};

struct FitResult {
  ScorerParams params;
  // Row 0 holds the losses of the initial parameters; row e the losses after
  // epoch e. Losses are mean per-query summed pair losses.
  std::vector<EpochStats> history;
  std::size_t train_examples = 0;
};

// An example with its documents already featurized.
struct PreparedExample {
  std::string query_id;
  std::vector<SparseVector> features;
  std::vector<int> ranking;
};

inline PreparedExample prepare(const DistilledExample& ex, const DocTexts& docs, const FeatureConfig& features) {
  validate(ex);
  PreparedExample p{ex.query_id, {}, ex.llm_ranking};
  p.features.reserve(ex.size());
  for (const auto& id : ex.doc_ids) {
    try {
      p.features.push_back(featurize(ex.query_text, docs.at(id), features));
    } catch (const DataError& e) {
      throw DataError("query " + ex.query_id + ": " + e.what());
    }
  }
  return p;
}

// Loss of one example; when `grad` is non-empty, adds scale * dLoss/dparams.
inline double example_loss(const ScorerParams& params, const PreparedExample& ex, ScoreStrategy strategy,
                           bool literal, std::span<double> grad = {}, double scale = 1.0) {
  const std::size_t m = ex.features.size();
  std::vector<ForwardCache> caches(m);
  std::vector<double> scores(m);
  for (std::size_t k = 0; k < m; ++k) {
    forward(params, ex.features[k], caches[k]);
    scores[k] = score(caches[k].logits, strategy);
  }
  const double loss = ranknet_loss(scores, ex.ranking, literal);
  if (!grad.empty()) {
    const auto ds = ranknet_grad(scores, ex.ranking, literal);
    for (std::size_t k = 0; k < m; ++k) {
      if (ds[k] == 0.0) continue;
      const auto [dt, df] = score_gradient(caches[k].logits, strategy);
      backward(params, ex.features[k], caches[k], scale * ds[k] * dt, scale * ds[k] * df, grad);
    }
  }
  return loss;
}

// Mean example loss over a batch, accumulating the gradient of that mean.
inline double batch_loss(const ScorerParams& params, std::span<const PreparedExample* const> batch,
                         ScoreStrategy strategy, bool literal, std::span<double> grad = {}) {
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto* ex : batch) total += example_loss(params, *ex, strategy, literal, grad, scale);
  return total * scale;
}

inline double mean_loss(const ScorerParams& params, const std::vector<PreparedExample>& set, ScoreStrategy strategy,
                        bool literal) {
  if (set.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& ex : set) total += example_loss(params, ex, strategy, literal);
  return total / static_cast<double>(set.size());
}

inline bool passes_filters(const DistilledExample& ex, const TrainConfig& c) {
  if (c.kinds == KindFilter::CroppedOnly && ex.kind != QueryKind::Cropped) return false;
  if (c.kinds == KindFilter::GeneratedOnly && ex.kind != QueryKind::Generated) return false;
  if (c.exclude_source && ex.source == *c.exclude_source) return false;
  return true;
}

// Each example is subsampled once to min(M', M) documents with a seed derived
// from the config seed and its query id.
inline std::vector<PreparedExample> prepare_set(const std::vector<DistilledExample>& examples, const DocTexts& docs,
                                                const FeatureConfig& features, std::size_t m_prime,
                                                std::uint64_t seed) {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const std::size_t keep = std::min(m_prime, ex.size());
    if (keep < 2) continue;
    const auto sampled = subsample_docs(ex, keep, mix_seed(seed, detail::fnv1a(ex.query_id)));
    out.push_back(prepare(sampled, docs, features));
  }
  return out;
}

using FitProgress = std::function<void(const EpochStats&)>;

// The filters apply to training examples only, so validation loss stays
// comparable across ablation settings.
inline FitResult fit(const TrainConfig& config, const std::vector<DistilledExample>& train,
                     const std::vector<DistilledExample>& validation, const DocTexts& docs, ScorerParams initial,
                     const FitProgress& progress = {}) {
  validate(config);
  std::vector<DistilledExample> kept;
  for (const auto& ex : train) {
    if (passes_filters(ex, config)) kept.push_back(ex);
  }
  auto train_set = prepare_set(kept, docs, initial.features, config.docs_per_sample, config.seed);
  if (train_set.empty()) throw DataError("no training examples left after filtering");
  const auto val_set = prepare_set(validation, docs, initial.features, config.docs_per_sample, config.seed);

  FitResult result;
  result.params = std::move(initial);
  result.train_examples = train_set.size();
  auto& params = result.params;
  auto record = [&](std::size_t epoch) {
    EpochStats row{epoch, 0.0, 0.0};
    try {
      row.train_loss = mean_loss(params, train_set, config.strategy, config.literal_sign);
      row.val_loss = mean_loss(params, val_set, config.strategy, config.literal_sign);
      if (!std::isfinite(row.train_loss)) throw DataError("non-finite loss");
    } catch (const DataError& e) {
      throw DataError("training diverged after epoch " + std::to_string(epoch) + ": " + e.what());
    }
    result.history.push_back(row);
    if (progress) progress(row);
  };
  record(0);

  std::vector<const PreparedExample*> order;
  for (const auto& ex : train_set) order.push_back(&ex);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->query_id < b->query_id; });
  AdamState state(params.data.size());
  std::vector<double> grad(params.data.size());
  Rng rng(mix_seed(config.seed, 0x7a11));
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      ++batch_no;
      const std::size_t end = std::min(order.size(), start + config.batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss;
      try {
        loss = batch_loss(params, std::span(order).subspan(start, end - start), config.strategy, config.literal_sign,
                          grad);
        if (!std::isfinite(loss)) throw DataError("non-finite loss");
        adamw_step(params.data, grad, state, config.adam);
      } catch (const DataError& e) {
        throw DataError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) +
                        ": " + e.what());
      }
    }
    record(epoch);
  }
  return result;
}

inline void write_history(std::ostream& out, const std::vector<EpochStats>& history) {
  out << "epoch\ttrain_loss\tval_loss\n";
  for (const auto& row : history) {
    out << row.epoch << '\t' << detail::format_score(row.train_loss) << '\t'
        << (std::isfinite(row.val_loss) ? detail::format_score(row.val_loss) : std::string("nan")) << '\n';
  }
}

}  // namespace distilrank
