#pragma once

// Analysis of where interpolation helps: per-token win rate under teacher
// forcing, bucketed win rates, and per-position entropy-ratio / JSD
// trajectories over generated continuations.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnlm/corpus.hpp"
#include "knnlm/decode.hpp"
#include "knnlm/information.hpp"
#include "knnlm/interp.hpp"
#include "knnlm/ivf.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/reflm.hpp"

namespace knnlm {

/// Gold-token probabilities under the base LM and the retrieval
/// distribution, one entry per evaluated position.
struct TeacherForcedScores {
  std::vector<TokenId> gold;
  std::vector<double> p_lm;
  std::vector<double> p_knn;
};

/// Teacher-forced pass: each position is predicted from its gold history.
/// Retrieval runs once per position and is shared by every lambda.
template <std::floating_point T>
TeacherForcedScores score_positions(const ModelParams<T>& params, const Retriever& retriever,
                                    std::span<const TokenId> tokens, const InterpConfig& cfg,
                                    std::size_t threads = 1) {
  if (tokens.size() <= params.shape.n_ctx)
    throw InvalidArgument("token_win_rate: evaluation tokens must be longer than n_ctx");
  cfg.validate();
  const std::size_t n = tokens.size();
  TeacherForcedScores s{{tokens.begin(), tokens.end()}, std::vector<double>(n), std::vector<double>(n)};
  const std::size_t n_chunks = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  const std::size_t chunk = (n + n_chunks - 1) / n_chunks;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    Workspace<T> ws(params.shape);
    for (std::size_t t = c * chunk; t < std::min(n, (c + 1) * chunk); ++t) {
      if (tokens[t] >= params.shape.vocab_size) throw InvalidArgument("evaluation token id out of range");
      const auto window = context_window(tokens, t, params.shape.n_ctx);
      auto fwd = forward(params, window, ws);
      std::vector<float> q(fwd.context.begin(), fwd.context.end());
      const auto knn = knn_distribution(retriever.search(q, cfg.k, cfg.distance), cfg.tau, params.shape.vocab_size);
      s.p_lm[t] = fwd.dist[tokens[t]];
      s.p_knn[t] = knn[tokens[t]];
    }
  });
  return s;
}

struct WinRateReport {
  InterpConfig config;
  std::size_t n_tokens = 0;
  std::size_t n_wins = 0;
  double win_rate = 0.0;
  double agg_ppl_base = 0.0;
  double agg_ppl_interp = 0.0;
  std::vector<double> per_token_deltas;  // ln P'(gold) - ln P_lm(gold)
  std::vector<unsigned char> wins;       // P'(gold) > P_lm(gold)
  std::vector<TokenId> gold;

  double sum_deltas() const {
    double s = 0.0;
    for (double d : per_token_deltas) s += d;
    return s;
  }

  /// |sum of deltas - n (ln ppl_base - ln ppl_interp)|, relative to the
  /// larger of the two magnitudes (0 when both vanish).
  double decomposition_residual() const {
    const double lhs = sum_deltas();
    const double rhs = static_cast<double>(n_tokens) * (std::log(agg_ppl_base) - std::log(agg_ppl_interp));
    const double scale = std::max(std::abs(lhs), std::abs(rhs));
    return scale == 0.0 ? std::abs(lhs - rhs) : std::abs(lhs - rhs) / scale;
  }
};

/// Ties (P' == P_lm) are not wins. Aggregate perplexities are accumulated
/// independently of the per-token deltas.
inline WinRateReport win_rate_from_scores(const TeacherForcedScores& s, const InterpConfig& cfg) {
  const std::size_t n = s.gold.size();
  if (n == 0 || s.p_lm.size() != n || s.p_knn.size() != n) throw InvalidArgument("win rate: inconsistent scores");
  WinRateReport r;
  r.config = cfg;
  r.n_tokens = n;
  r.gold = s.gold;
  r.per_token_deltas.resize(n);
  r.wins.resize(n);
  double nll_base = 0.0, nll_interp = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double p_base = s.p_lm[t];
    const double p_interp = cfg.lambda * s.p_knn[t] + (1.0 - cfg.lambda) * p_base;
    r.wins[t] = p_interp > p_base;
    r.n_wins += r.wins[t];
    r.per_token_deltas[t] = std::log(p_interp) - std::log(p_base);
    nll_base -= std::log(p_base);
    nll_interp -= std::log(p_interp);
  }
  r.win_rate = static_cast<double>(r.n_wins) / static_cast<double>(n);
  r.agg_ppl_base = std::exp(nll_base / static_cast<double>(n));
  r.agg_ppl_interp = std::exp(nll_interp / static_cast<double>(n));
  return r;
}

template <std::floating_point T>
WinRateReport token_win_rate(const ModelParams<T>& params, const Retriever& retriever, std::span<const TokenId> tokens,
                             const InterpConfig& cfg, std::size_t threads = 1) {
  return win_rate_from_scores(score_positions(params, retriever, tokens, cfg, threads), cfg);
}

// ---------------------------------------------------------------------------
// Buckets

enum class BucketMode { frequency, external_annotation };

struct BucketRow {
  std::string label;
  std::size_t n_tokens = 0;
  std::size_t n_wins = 0;
  double win_rate = 0.0;
};

struct BucketReport {
  BucketMode mode = BucketMode::frequency;
  std::vector<BucketRow> rows;
};

struct FrequencyQuartiles {
  double q1 = 0.0, q2 = 0.0, q3 = 0.0;
};

/// Quartiles of the per-type counts of non-reserved vocabulary entries,
/// linear interpolation between order statistics.
inline FrequencyQuartiles frequency_quartiles(const Vocab& vocab) {
  std::vector<double> c;
  for (std::size_t id = 2; id < vocab.size(); ++id) c.push_back(static_cast<double>(vocab.count(static_cast<TokenId>(id))));
  if (c.empty()) throw InvalidArgument("frequency quartiles need at least one non-reserved token");
  std::sort(c.begin(), c.end());
  auto q = [&](double frac) {
    const double pos = frac * static_cast<double>(c.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, c.size() - 1);
    return c[lo] + (pos - static_cast<double>(lo)) * (c[hi] - c[lo]);
  };
  return {q(0.25), q(0.5), q(0.75)};
}

/// "Q1" holds the rarest types; the unknown token gets its own bucket.
inline std::string frequency_bucket(const Vocab& vocab, const FrequencyQuartiles& q, TokenId id) {
  if (id == kUnkId || id == kBosId) return "unk";
  const double c = static_cast<double>(vocab.count(id));
  if (c <= q.q1) return "Q1";
  if (c <= q.q2) return "Q2";
  if (c <= q.q3) return "Q3";
  return "Q4";
}

/// Partitions evaluated positions by bucket. Frequency mode needs vocab;
/// annotation mode needs one label per evaluated position.
inline BucketReport bucketed_win_rate(const WinRateReport& report, BucketMode mode, const Vocab* vocab,
                                      const std::vector<std::string>* annotations = nullptr) {
  BucketReport out;
  out.mode = mode;
  std::vector<std::string> labels(report.n_tokens);
  if (mode == BucketMode::frequency) {
    if (vocab == nullptr) throw InvalidArgument("frequency buckets require the vocabulary");
    const auto q = frequency_quartiles(*vocab);
    for (std::size_t t = 0; t < report.n_tokens; ++t) labels[t] = frequency_bucket(*vocab, q, report.gold[t]);
  } else {
    if (annotations == nullptr || annotations->size() != report.n_tokens)
      throw InvalidArgument("annotations must label every evaluated position (" + std::to_string(report.n_tokens) +
                            " expected, " + std::to_string(annotations ? annotations->size() : 0) + " given)");
    labels = *annotations;
  }
  std::map<std::string, BucketRow> rows;
  for (std::size_t t = 0; t < report.n_tokens; ++t) {
    auto& r = rows[labels[t]];
    r.label = labels[t];
    ++r.n_tokens;
    r.n_wins += report.wins[t];
  }
  for (auto& [_, r] : rows) {
    r.win_rate = static_cast<double>(r.n_wins) / static_cast<double>(r.n_tokens);
    out.rows.push_back(r);
  }
  return out;
}

/// Reads `position<TAB>label` lines; every position in [0, n) must appear once.
inline std::vector<std::string> read_annotations(const std::string& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open for reading: " + path);
  std::vector<std::string> labels(n);
  std::vector<char> seen(n, 0);
  std::string line;
  std::size_t lineno = 0, filled = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::size_t pos = 0;
    try {
      if (tab == std::string::npos) throw std::invalid_argument("missing tab");
      pos = std::stoull(line.substr(0, tab));
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected position<TAB>label");
    }
    if (pos >= n || seen[pos])
      throw FormatError(path + ":" + std::to_string(lineno) + ": position out of range or repeated");
    seen[pos] = 1;
    labels[pos] = line.substr(tab + 1);
    ++filled;
  }
  if (filled != n)
    throw InvalidArgument(path + ": annotations cover " + std::to_string(filled) + " of " + std::to_string(n) +
                          " positions");
  return labels;
}

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryPoint {
  std::optional<double> mean_entropy_ratio;  // absent when no usable sample
  std::optional<double> mean_jsd;
  std::size_t n = 0;                 // records reaching this position
  std::size_t n_ratio_excluded = 0;  // of those, steps with H(P_lm) = 0
};

struct TrajectoryReport {
  std::vector<TrajectoryPoint> positions;
};

/// Per-position mean over records of H(P_knn)/H(P_lm) (mean of ratios) and
/// of JSD. Steps with H(P_lm) = 0 are left out of the ratio mean.
inline TrajectoryReport trajectories(std::span<const GenerationRecord> records) {
  if (records.empty()) throw InvalidArgument("trajectories: no records");
  std::size_t len = 0;
  for (const auto& r : records) {
    if (!r.interp) throw InvalidArgument("trajectories: baseline records carry no retrieval statistics");
    len = std::max(len, r.per_step.size());
  }
  std::vector<double> ratio_sum(len, 0.0), jsd_sum(len, 0.0);
  std::vector<std::size_t> ratio_n(len, 0);
  TrajectoryReport out;
  out.positions.resize(len);
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.per_step.size(); ++i) {
      const auto& s = r.per_step[i];
      if (!s.h_knn || !s.jsd) throw InvalidArgument("trajectories: step without retrieval statistics");
      auto& pt = out.positions[i];
      ++pt.n;
      jsd_sum[i] += *s.jsd;
      if (s.h_lm > 0.0) {
        ratio_sum[i] += *s.h_knn / s.h_lm;
        ++ratio_n[i];
      } else {
        ++pt.n_ratio_excluded;
      }
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    auto& pt = out.positions[i];
    if (pt.n > 0) pt.mean_jsd = jsd_sum[i] / static_cast<double>(pt.n);
    if (ratio_n[i] > 0) pt.mean_entropy_ratio = ratio_sum[i] / static_cast<double>(ratio_n[i]);
  }
  return out;
}

/// Ordinary least-squares slope of y against position, skipping absent values.
inline double least_squares_slope(std::span<const std::optional<double>> y) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!y[i]) continue;
    const double x = static_cast<double>(i);
    n += 1;
    sx += x;
    sy += *y[i];
    sxx += x * x;
    sxy += x * *y[i];
  }
  const double den = n * sxx - sx * sx;
  return den == 0.0 ? 0.0 : (n * sxy - sx * sy) / den;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string format_double(double x) {
  if (std::isnan(x)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string format_optional(const std::optional<double>& x) { return x ? format_double(*x) : "NA"; }

inline void write_winrate_csv(const std::string& path, std::span<const WinRateReport> reports) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path);
  out << "lambda,tau,k,distance,n_tokens,n_wins,win_rate,agg_ppl_base,agg_ppl_interp,sum_deltas,"
         "n_delta_log_ppl,decomposition_residual\n";
  for (const auto& r : reports) {
    const double rhs = static_cast<double>(r.n_tokens) * (std::log(r.agg_ppl_base) - std::log(r.agg_ppl_interp));
    out << format_double(r.config.lambda) << ',' << format_double(r.config.tau) << ',' << r.config.k << ','
        << to_string(r.config.distance) << ',' << r.n_tokens << ',' << r.n_wins << ',' << format_double(r.win_rate)
        << ',' << format_double(r.agg_ppl_base) << ',' << format_double(r.agg_ppl_interp) << ','
        << format_double(r.sum_deltas()) << ',' << format_double(rhs) << ','
        << format_double(r.decomposition_residual()) << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

inline void write_buckets_csv(const std::string& path, const BucketReport& report) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path);
  out << "bucket,count,win_rate\n";
  for (const auto& r : report.rows) out << r.label << ',' << r.n_tokens << ',' << format_double(r.win_rate) << '\n';
  if (!out) throw Error("write failed: " + path);
}

inline void write_trajectory_csv(const std::string& path, const TrajectoryReport& report) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path);
  out << "position,mean_entropy_ratio,mean_jsd,n,n_ratio_excluded\n";
  for (std::size_t i = 0; i < report.positions.size(); ++i) {
    const auto& p = report.positions[i];
    out << i << ',' << format_optional(p.mean_entropy_ratio) << ',' << format_optional(p.mean_jsd) << ',' << p.n << ','
        << p.n_ratio_excluded << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

}  // namespace knnlm
