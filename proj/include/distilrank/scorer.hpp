#pragma once

// Compact two-logit cross-encoder: signed feature hashing of a query/document
// pair, one ReLU hidden layer, and a (z_true, z_false) head. Scores are
// derived from the head by one of three strategies.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "distilrank/error.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/rng.hpp"
#include "distilrank/tokenize.hpp"

namespace distilrank {

struct FeatureConfig {
  std::uint32_t hash_dim = 1u << 18;
  std::size_t interaction_cap = 16;
  TokenizerConfig tokenizer;
};

inline void validate(const FeatureConfig& c) {
  if (c.hash_dim == 0 || !std::has_single_bit(c.hash_dim)) {
    throw UsageError("feature hash dimension must be a power of two, got " + std::to_string(c.hash_dim));
  }
}

struct Feature {
  std::uint32_t index = 0;
  double value = 0.0;

  bool operator==(const Feature&) const = default;
};

// Indices strictly increasing, values finite and non-zero.
using SparseVector = std::vector<Feature>;

namespace detail {

inline std::uint64_t fnv1a(std::string_view a, std::string_view b = {}, std::string_view c = {}) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto part : {a, b, c}) {
    for (unsigned char ch : part) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace detail

struct HashedKey {
  std::uint32_t index;
  double sign;
};

// Bucket and sign of a namespaced feature key such as "q:" + token.
inline HashedKey hash_feature(std::string_view ns, std::string_view key, std::uint32_t hash_dim,
                              std::string_view key2 = {}) {
  const std::uint64_t h = detail::fnv1a(ns, key, key2);
  const std::uint64_t s = mix_seed(h, 0x5157);
  return {static_cast<std::uint32_t>(h & (hash_dim - 1)), (s >> 63) ? -1.0 : 1.0};
}

// Term-frequency features of the pair under four namespaces:
//   q:   query tokens
//   d:   document tokens
//   x:   query tokens present in the document, weighted by document tf
//   qxd: first interaction_cap query tokens crossed with every document token
inline SparseVector featurize(std::string_view query, std::string_view document, const FeatureConfig& config) {
  validate(config);
  const auto q = tokenize(query, config.tokenizer);
  const auto d = tokenize(document, config.tokenizer);
  std::unordered_map<std::string_view, int> doc_tf;
  for (const auto& t : d) ++doc_tf[t];

  std::map<std::uint32_t, double> acc;
  auto add = [&](std::string_view ns, std::string_view key, double v, std::string_view key2 = {}) {
    const auto hk = hash_feature(ns, key, config.hash_dim, key2);
    acc[hk.index] += hk.sign * v;
  };
  for (const auto& t : q) add("q:", t, 1.0);
  for (const auto& t : d) add("d:", t, 1.0);
  std::unordered_map<std::string_view, bool> overlap_done;
  for (const auto& t : q) {
    const auto it = doc_tf.find(t);
    if (it != doc_tf.end() && !overlap_done[t]) {
      overlap_done[t] = true;
      add("x:", t, it->second);
    }
  }
  const std::size_t cap = std::min(config.interaction_cap, q.size());
  for (std::size_t i = 0; i < cap; ++i) {
    for (const auto& [t, tf] : doc_tf) add("qxd:", q[i], tf, std::string("|") + std::string(t));
  }
  SparseVector out;
  out.reserve(acc.size());
  for (const auto& [idx, v] : acc) {
    if (v != 0.0) out.push_back({idx, v});
  }
  return out;
}

struct LogitPair {
  double z_true = 0.0;
  double z_false = 0.0;

  bool operator==(const LogitPair&) const = default;
};

enum class ScoreStrategy { SoftmaxTrueFalse, SingleLogit, LogitDifference };

inline constexpr std::string_view to_string(ScoreStrategy s) {
  switch (s) {
    case ScoreStrategy::SoftmaxTrueFalse: return "softmax";
    case ScoreStrategy::SingleLogit: return "single_logit";
    case ScoreStrategy::LogitDifference: return "difference";
  }
  return "difference";
}

inline std::optional<ScoreStrategy> parse_strategy(std::string_view s) {
  for (auto v : {ScoreStrategy::SoftmaxTrueFalse, ScoreStrategy::SingleLogit, ScoreStrategy::LogitDifference}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// softmax:      e^zt / (e^zt + e^zf), evaluated as sigmoid(zt - zf)
// single_logit: zt (output unit 0 stands in for a dedicated ranking token)
// difference:   zt - zf
inline double score(const LogitPair& z, ScoreStrategy strategy) {
  switch (strategy) {
    case ScoreStrategy::SoftmaxTrueFalse: return sigmoid(z.z_true - z.z_false);
    case ScoreStrategy::SingleLogit: return z.z_true;
    case ScoreStrategy::LogitDifference: return z.z_true - z.z_false;
  }
  return 0.0;
}

// (d score / d z_true, d score / d z_false).
inline std::pair<double, double> score_gradient(const LogitPair& z, ScoreStrategy strategy) {
  switch (strategy) {
    case ScoreStrategy::SoftmaxTrueFalse: {
      const double s = sigmoid(z.z_true - z.z_false);
      return {s * (1.0 - s), -s * (1.0 - s)};
    }
    case ScoreStrategy::SingleLogit: return {1.0, 0.0};
    case ScoreStrategy::LogitDifference: return {1.0, -1.0};
  }
  return {0.0, 0.0};
}

// All weights in one buffer: W1 (F x H, one row of H per hash bucket), b1 (H),
// W2 (H x 2, row j holds hidden unit j's weights to z_true, z_false), b2 (2).
struct ScorerParams {
  FeatureConfig features;
  std::size_t hidden = 64;
  std::string version = "distilrank-scorer/1";
  std::vector<double> data;

  ScorerParams() = default;
  ScorerParams(FeatureConfig f, std::size_t h) : features(f), hidden(h) {
    validate(features);
    if (hidden < 1) throw UsageError("hidden size must be >= 1");
    data.assign(size(), 0.0);
  }

  std::size_t w1_size() const { return static_cast<std::size_t>(features.hash_dim) * hidden; }
  std::size_t size() const { return w1_size() + hidden + 2 * hidden + 2; }

  std::span<double> w1() { return {data.data(), w1_size()}; }
  std::span<double> b1() { return {data.data() + w1_size(), hidden}; }
  std::span<double> w2() { return {data.data() + w1_size() + hidden, 2 * hidden}; }
  std::span<double> b2() { return {data.data() + w1_size() + 3 * hidden, 2}; }
  std::span<const double> w1() const { return {data.data(), w1_size()}; }
  std::span<const double> b1() const { return {data.data() + w1_size(), hidden}; }
  std::span<const double> w2() const { return {data.data() + w1_size() + hidden, 2 * hidden}; }
  std::span<const double> b2() const { return {data.data() + w1_size() + 3 * hidden, 2}; }
};

// Small Gaussian init; b1 is slightly positive so ReLUs start active.
inline ScorerParams init_params(const FeatureConfig& features, std::size_t hidden, std::uint64_t seed,
                                double w1_scale = 0.05) {
  ScorerParams p(features, hidden);
  Rng rng(seed);
  for (auto& w : p.w1()) w = w1_scale * rng.normal();
  for (auto& b : p.b1()) b = 0.1;
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (auto& w : p.w2()) w = s2 * rng.normal();
  return p;
}

struct ForwardCache {
  std::vector<double> pre;
  std::vector<double> act;
  LogitPair logits;
};

inline void forward(const ScorerParams& params, const SparseVector& x, ForwardCache& cache) {
  const std::size_t H = params.hidden;
  const auto w1 = params.w1();
  const auto b1 = params.b1();
  const auto w2 = params.w2();
  const auto b2 = params.b2();
  cache.pre.assign(b1.begin(), b1.end());
  for (const auto& f : x) {
    const double* row = w1.data() + static_cast<std::size_t>(f.index) * H;
    for (std::size_t j = 0; j < H; ++j) cache.pre[j] += f.value * row[j];
  }
  cache.act.resize(H);
  double zt = b2[0];
  double zf = b2[1];
  for (std::size_t j = 0; j < H; ++j) {
    const double a = cache.pre[j] > 0.0 ? cache.pre[j] : 0.0;
    cache.act[j] = a;
    zt += a * w2[2 * j];
    zf += a * w2[2 * j + 1];
  }
  if (!std::isfinite(zt) || !std::isfinite(zf)) throw DataError("scorer produced non-finite logits");
  cache.logits = {zt, zf};
}

// h = relu(W1^T x + b1); (z_true, z_false) = W2^T h + b2.
inline LogitPair forward(const ScorerParams& params, const SparseVector& x) {
  ForwardCache cache;
  forward(params, x, cache);
  return cache.logits;
}

// Accumulates d(loss)/d(params) into `grad` (same layout as params.data)
// given d(loss)/d(z_true) and d(loss)/d(z_false) for one input.
inline void backward(const ScorerParams& params, const SparseVector& x, const ForwardCache& cache, double dz_true,
                     double dz_false, std::span<double> grad) {
  const std::size_t H = params.hidden;
  const std::size_t off_b1 = params.w1_size();
  const std::size_t off_w2 = off_b1 + H;
  const std::size_t off_b2 = off_w2 + 2 * H;
  const auto w2 = params.w2();
  grad[off_b2] += dz_true;
  grad[off_b2 + 1] += dz_false;
  thread_local std::vector<double> dpre;
  dpre.assign(H, 0.0);
  for (std::size_t j = 0; j < H; ++j) {
    grad[off_w2 + 2 * j] += cache.act[j] * dz_true;
    grad[off_w2 + 2 * j + 1] += cache.act[j] * dz_false;
    if (cache.pre[j] > 0.0) dpre[j] = w2[2 * j] * dz_true + w2[2 * j + 1] * dz_false;
  }
  for (std::size_t j = 0; j < H; ++j) grad[off_b1 + j] += dpre[j];
  for (const auto& f : x) {
    double* row = grad.data() + static_cast<std::size_t>(f.index) * H;
    for (std::size_t j = 0; j < H; ++j) row[j] += f.value * dpre[j];
  }
}

// ---------------------------------------------------------------- checkpoints

// One JSON header line, then little-endian float32 arrays W1, b1, W2, b2.
inline void save_checkpoint(std::ostream& out, const ScorerParams& params, ScoreStrategy strategy) {
  nlohmann::ordered_json header;
  header["format"] = "distilrank-checkpoint";
  header["version"] = params.version;
  header["hash_dim"] = params.features.hash_dim;
  header["hidden"] = params.hidden;
  header["interaction_cap"] = params.features.interaction_cap;
  header["lowercase"] = params.features.tokenizer.lowercase;
  header["min_token_length"] = params.features.tokenizer.min_token_length;
  header["strategy"] = std::string(to_string(strategy));
  header["arrays"] = {"W1", "b1", "W2", "b2"};
  out << header.dump() << '\n';
  std::vector<char> buf(params.data.size() * 4);
  for (std::size_t i = 0; i < params.data.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(params.data[i]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(buf.data() + 4 * i, &bits, 4);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing checkpoint");
}

struct Checkpoint {
  ScorerParams params;
  ScoreStrategy strategy = ScoreStrategy::LogitDifference;
};

inline Checkpoint load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty checkpoint");
  Checkpoint ck;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.value("format", "") != "distilrank-checkpoint") throw DataError("not a distilrank checkpoint");
    FeatureConfig f;
    f.hash_dim = h.at("hash_dim").get<std::uint32_t>();
    f.interaction_cap = h.at("interaction_cap").get<std::size_t>();
    f.tokenizer.lowercase = h.at("lowercase").get<bool>();
    f.tokenizer.min_token_length = h.at("min_token_length").get<std::size_t>();
    ck.params = ScorerParams(f, h.at("hidden").get<std::size_t>());
    ck.params.version = h.at("version").get<std::string>();
    const auto strategy = parse_strategy(h.at("strategy").get<std::string>());
    if (!strategy) throw DataError("checkpoint: unknown strategy");
    ck.strategy = *strategy;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  std::vector<char> buf(ck.params.data.size() * 4);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError("checkpoint truncated");
  for (std::size_t i = 0; i < ck.params.data.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, buf.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    const double v = std::bit_cast<float>(bits);
    if (!std::isfinite(v)) throw DataError("checkpoint holds non-finite weights");
    ck.params.data[i] = v;
  }
  return ck;
}

// ---------------------------------------------------------------- external logits

// query_id -> doc_id -> logits computed elsewhere (e.g. by a real T5).
using LogitMap = std::map<std::string, std::map<std::string, LogitPair>>;

inline LogitMap read_external_logits(std::istream& in) {
  LogitMap out;
  std::string line;
  std::size_t lineno = 0;
  while (detail::next_line(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const auto cols = detail::split_tabs(line);
    LogitPair z;
    if (cols.size() != 4 || !detail::parse_number(cols[2], z.z_true) || !detail::parse_number(cols[3], z.z_false) ||
        !std::isfinite(z.z_true) || !std::isfinite(z.z_false)) {
      throw DataError(detail::at_line(lineno, "expected qid<TAB>docid<TAB>z_true<TAB>z_false"));
    }
    if (!out[std::string(cols[0])].emplace(std::string(cols[1]), z).second) {
      throw DataError(detail::at_line(lineno, "duplicate logits for (" + std::string(cols[0]) + ", " +
                                                  std::string(cols[1]) + ")"));
    }
  }
  return out;
}

inline LogitMap load_external_logits(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return read_external_logits(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace distilrank
