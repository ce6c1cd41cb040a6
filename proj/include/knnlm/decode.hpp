#pragma once

// Decoding strategies and the instrumented autoregressive generation loop,
// with or without retrieval interpolation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnlm/common.hpp"
#include "knnlm/distribution.hpp"
#include "knnlm/information.hpp"
#include "knnlm/interp.hpp"
#include "knnlm/ivf.hpp"
#include "knnlm/reflm.hpp"

namespace knnlm {

enum class StrategyKind { greedy, ancestral, top_k, nucleus, beam };

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::greedy: return "greedy";
    case StrategyKind::ancestral: return "ancestral";
    case StrategyKind::top_k: return "top_k";
    case StrategyKind::nucleus: return "nucleus";
    case StrategyKind::beam: return "beam";
  }
  return "?";
}

inline StrategyKind parse_strategy_kind(std::string_view s) {
  for (auto k : {StrategyKind::greedy, StrategyKind::ancestral, StrategyKind::top_k, StrategyKind::nucleus,
                 StrategyKind::beam})
    if (s == to_string(k)) return k;
  throw InvalidArgument("unknown decoding strategy '" + std::string(s) +
                        "' (expected greedy, ancestral, top_k, nucleus or beam)");
}

struct DecodingStrategy {
  StrategyKind kind = StrategyKind::nucleus;
  std::size_t k = 40;          // top_k
  double p = 0.8;              // nucleus
  std::size_t beam_size = 5;   // beam
  std::uint64_t seed = 0;

  void validate() const {
    if (kind == StrategyKind::top_k && k < 1) throw InvalidArgument("top_k requires k >= 1");
    if (kind == StrategyKind::nucleus && !(p > 0.0 && p <= 1.0)) throw InvalidArgument("nucleus requires p in (0, 1]");
    if (kind == StrategyKind::beam && beam_size < 1) throw InvalidArgument("beam search requires beam_size >= 1");
  }
};

// Cumulative-mass comparisons tolerate this much rounding, so that e.g.
// 0.5 + 0.3 counts as reaching p = 0.8.
inline constexpr double kNucleusSlack = 1e-12;

namespace detail {

inline std::vector<TokenId> ids_by_probability(std::span<const double> p) {
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return p[a] > p[b]; });
  return ids;
}

/// Unnormalized weights restricted to the strategy's candidate set; zeros
/// elsewhere. Sampling strategies draw from these.
inline std::vector<double> truncated_weights(std::span<const double> p, const DecodingStrategy& s) {
  switch (s.kind) {
    case StrategyKind::top_k: {
      if (s.k >= p.size()) return {p.begin(), p.end()};
      const auto ids = ids_by_probability(p);
      std::vector<double> w(p.size(), 0.0);
      for (std::size_t i = 0; i < s.k; ++i) w[ids[i]] = p[ids[i]];
      return w;
    }
    case StrategyKind::nucleus: {
      const auto ids = ids_by_probability(p);
      std::vector<double> w(p.size(), 0.0);
      double cum = 0.0;
      for (TokenId id : ids) {
        if (p[id] <= 0.0) break;
        w[id] = p[id];
        cum += p[id];
        if (cum >= s.p - kNucleusSlack) break;
      }
      return w;
    }
    default:
      return {p.begin(), p.end()};
  }
}

/// Inverse CDF over id order with a single uniform draw.
inline TokenId sample_id_order(std::span<const double> w, double u) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  const double target = u * total;
  double cum = 0.0;
  TokenId last = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    cum += w[i];
    last = static_cast<TokenId>(i);
    if (target < cum) return last;
  }
  return last;
}

inline TokenId argmax(std::span<const double> p) {
  return static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace detail

/// The renormalized distribution a sampling strategy actually draws from.
inline NextTokenDistribution truncated_distribution(const NextTokenDistribution& dist, const DecodingStrategy& s) {
  auto w = detail::truncated_weights(dist.probs, s);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return NextTokenDistribution(std::move(w));
}

/// greedy: argmax, ties to the smaller id. Sampling strategies consume
/// exactly one uniform draw from rng.
inline TokenId select_next(const NextTokenDistribution& dist, const DecodingStrategy& s, Rng& rng) {
  if (dist.size() == 0) throw InvalidArgument("select_next: empty distribution");
  switch (s.kind) {
    case StrategyKind::greedy:
    case StrategyKind::beam:
      return detail::argmax(dist.probs);
    case StrategyKind::ancestral:
    case StrategyKind::top_k:
    case StrategyKind::nucleus: {
      const double u = rng.uniform();
      return detail::sample_id_order(detail::truncated_weights(dist.probs, s), u);
    }
  }
  return 0;
}

struct StepStats {
  double h_lm = 0.0;
  std::optional<double> h_knn;
  std::optional<double> jsd;
  TokenId chosen = 0;
  double p_chosen_final = 0.0;

  friend bool operator==(const StepStats&, const StepStats&) = default;
};

struct GenerationRecord {
  std::vector<TokenId> prefix;
  std::vector<TokenId> continuation;
  std::vector<StepStats> per_step;
  DecodingStrategy strategy;
  std::optional<InterpConfig> interp;
};

/// Next-token distributions at one step of decoding or teacher forcing.
struct Prediction {
  NextTokenDistribution lm;
  std::optional<NextTokenDistribution> knn;
  NextTokenDistribution final_dist;
  double h_lm = 0.0;
  std::optional<double> h_knn;
  std::optional<double> jsd;
};

namespace detail {

inline void check_bounds(const Prediction& pr, std::size_t vocab_size) {
  const double hmax = std::log(static_cast<double>(vocab_size)) + 1e-9;
  auto in = [](double x, double lo, double hi) { return std::isfinite(x) && x >= lo && x <= hi; };
  if (!in(pr.h_lm, 0.0, hmax) || (pr.h_knn && !in(*pr.h_knn, 0.0, hmax)) ||
      (pr.jsd && !in(*pr.jsd, 0.0, std::numbers::ln2)))
    throw Error("step statistics out of range (entropy outside [0, ln|V|] or JSD outside [0, ln 2])");
}

}  // namespace detail

/// Forward pass over the last n_ctx tokens of history, optionally followed
/// by retrieval with the context vector as query and interpolation.
template <std::floating_point T>
Prediction predict_next(const ModelParams<T>& params, Workspace<T>& ws, std::span<const TokenId> history,
                        const Retriever* retriever, const InterpConfig* interp) {
  if ((retriever == nullptr) != (interp == nullptr))
    throw InvalidArgument("retrieval requires both a datastore and an interpolation config");
  const auto window = context_window(history, history.size(), params.shape.n_ctx);
  auto fwd = forward(params, window, ws);
  Prediction pr;
  pr.h_lm = entropy(fwd.dist.probs);
  if (retriever != nullptr) {
    std::vector<float> q(fwd.context.begin(), fwd.context.end());
    const auto neighbors = retriever->search(q, interp->k, interp->distance);
    auto knn = knn_distribution(neighbors, interp->tau, params.shape.vocab_size);
    pr.final_dist = interpolate(knn, fwd.dist, interp->lambda);
    pr.h_knn = entropy(knn.probs);
    pr.jsd = js_divergence(knn.probs, fwd.dist.probs);
    pr.knn = std::move(knn);
  } else {
    pr.final_dist = fwd.dist;
  }
  pr.lm = std::move(fwd.dist);
  detail::check_bounds(pr, params.shape.vocab_size);
  return pr;
}

template <std::floating_point T>
GenerationRecord generate_beam(const ModelParams<T>& params, const Retriever* retriever,
                               std::span<const TokenId> prefix, std::size_t length, std::size_t beam_size,
                               const std::optional<InterpConfig>& interp);

/// Samples `length` tokens after prefix. Retrieval queries use the running
/// context including generated tokens.
template <std::floating_point T>
GenerationRecord generate(const ModelParams<T>& params, const Retriever* retriever, std::span<const TokenId> prefix,
                          std::size_t length, const DecodingStrategy& strategy,
                          const std::optional<InterpConfig>& interp, std::uint64_t seed) {
  strategy.validate();
  if (length < 1) throw InvalidArgument("generate: length must be >= 1");
  if ((retriever != nullptr) != interp.has_value())
    throw InvalidArgument("generate: interp config must be given exactly when a datastore is");
  if (interp) interp->validate();
  if (strategy.kind == StrategyKind::beam) {
    auto rec = generate_beam(params, retriever, prefix, length, strategy.beam_size, interp);
    rec.strategy = strategy;
    return rec;
  }

  GenerationRecord rec;
  rec.prefix.assign(prefix.begin(), prefix.end());
  rec.strategy = strategy;
  rec.interp = interp;
  std::vector<TokenId> history(prefix.begin(), prefix.end());
  Workspace<T> ws(params.shape);
  Rng rng(seed);
  const InterpConfig* icfg = interp ? &*interp : nullptr;
  for (std::size_t step = 0; step < length; ++step) {
    const auto pr = predict_next(params, ws, history, retriever, icfg);
    const TokenId next = select_next(pr.final_dist, strategy, rng);
    rec.per_step.push_back(StepStats{pr.h_lm, pr.h_knn, pr.jsd, next, pr.final_dist[next]});
    rec.continuation.push_back(next);
    history.push_back(next);
  }
  return rec;
}

/// Beam search over cumulative ln P', no length normalization. Candidates are
/// ranked by score, then parent beam rank, then token id.
template <std::floating_point T>
GenerationRecord generate_beam(const ModelParams<T>& params, const Retriever* retriever,
                               std::span<const TokenId> prefix, std::size_t length, std::size_t beam_size,
                               const std::optional<InterpConfig>& interp) {
  if (beam_size < 1) throw InvalidArgument("generate_beam: beam_size must be >= 1");
  if (length < 1) throw InvalidArgument("generate_beam: length must be >= 1");
  if ((retriever != nullptr) != interp.has_value())
    throw InvalidArgument("generate_beam: interp config must be given exactly when a datastore is");
  if (interp) interp->validate();

  struct Beam {
    std::vector<TokenId> tokens;
    std::vector<StepStats> stats;
    double score = 0.0;
  };
  struct Candidate {
    double score;
    std::size_t beam;
    TokenId token;
  };

  const std::size_t vocab = params.shape.vocab_size;
  const InterpConfig* icfg = interp ? &*interp : nullptr;
  Workspace<T> ws(params.shape);
  std::vector<Beam> beams(1);
  std::vector<TokenId> history;
  for (std::size_t step = 0; step < length; ++step) {
    std::vector<Candidate> cand;
    std::vector<Prediction> preds;
    cand.reserve(beams.size() * vocab);
    for (std::size_t b = 0; b < beams.size(); ++b) {
      history.assign(prefix.begin(), prefix.end());
      history.insert(history.end(), beams[b].tokens.begin(), beams[b].tokens.end());
      preds.push_back(predict_next(params, ws, history, retriever, icfg));
      const auto& p = preds.back().final_dist.probs;
      for (std::size_t v = 0; v < vocab; ++v)
        if (p[v] > 0.0) cand.push_back({beams[b].score + std::log(p[v]), b, static_cast<TokenId>(v)});
    }
    const auto better = [](const Candidate& a, const Candidate& c) {
      if (a.score != c.score) return a.score > c.score;
      if (a.beam != c.beam) return a.beam < c.beam;
      return a.token < c.token;
    };
    const std::size_t keep = std::min(beam_size, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), better);
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = cand[i];
      const auto& pr = preds[c.beam];
      Beam nb = beams[c.beam];
      nb.tokens.push_back(c.token);
      nb.stats.push_back(StepStats{pr.h_lm, pr.h_knn, pr.jsd, c.token, pr.final_dist[c.token]});
      nb.score = c.score;
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  GenerationRecord rec;
  rec.prefix.assign(prefix.begin(), prefix.end());
  rec.continuation = std::move(beams.front().tokens);
  rec.per_step = std::move(beams.front().stats);
  rec.strategy.kind = StrategyKind::beam;
  rec.strategy.beam_size = beam_size;
  rec.interp = interp;
  return rec;
}

/// Sum of ln p_chosen_final over a record's steps.
inline double sequence_log_prob(const GenerationRecord& rec) {
  double s = 0.0;
  for (const auto& st : rec.per_step) s += std::log(st.p_chosen_final);
  return s;
}

}  // namespace knnlm
