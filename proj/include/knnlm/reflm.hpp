#pragma once

// Fixed-window feed-forward neural language model.
//
//   x   = concat(embedding[w_1], ..., embedding[w_n])      n = n_ctx
//   h   = tanh(x * W_hidden + b_hidden)                      the context vector
//   P   = softmax(h * W_out + b_out)
//
// The hidden activation h doubles as the datastore key and retrieval query.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "knnlm/binary_io.hpp"
#include "knnlm/common.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/distribution.hpp"

namespace knnlm {

struct ModelShape {
  std::uint32_t vocab_size = 0;
  std::uint32_t n_ctx = 8;
  std::uint32_t d_emb = 64;
  std::uint32_t d_h = 128;

  std::size_t input_dim() const { return std::size_t{n_ctx} * d_emb; }
  std::size_t parameter_count() const {
    return std::size_t{vocab_size} * d_emb + input_dim() * d_h + d_h + std::size_t{d_h} * vocab_size + vocab_size;
  }
  void validate() const {
    if (vocab_size < 1 || n_ctx < 1 || d_emb < 1 || d_h < 1) throw InvalidArgument("model shape has a zero dimension");
  }
  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Model parameters; also used as the gradient container. All matrices are
/// row-major:
///   embedding  vocab_size x d_emb
///   hidden_w   (n_ctx * d_emb) x d_h
///   hidden_b   d_h
///   output_w   d_h x vocab_size
///   output_b   vocab_size
// Eigen picks its vectorized reduction order from the buffer address, so
// parameters live in aligned storage to keep training bit-reproducible.
template <typename T>
using ParamArray = std::vector<T, Eigen::aligned_allocator<T>>;

template <std::floating_point T>
struct ModelParams {
  ModelShape shape;
  ParamArray<T> embedding;
  ParamArray<T> hidden_w;
  ParamArray<T> hidden_b;
  ParamArray<T> output_w;
  ParamArray<T> output_b;

  static ModelParams zeros(const ModelShape& s) {
    s.validate();
    ModelParams p;
    p.shape = s;
    p.embedding.assign(std::size_t{s.vocab_size} * s.d_emb, T(0));
    p.hidden_w.assign(s.input_dim() * s.d_h, T(0));
    p.hidden_b.assign(s.d_h, T(0));
    p.output_w.assign(std::size_t{s.d_h} * s.vocab_size, T(0));
    p.output_b.assign(s.vocab_size, T(0));
    return p;
  }

  /// Visits the five arrays in declaration order.
  template <typename Fn>
  void for_each_array(Fn&& fn) {
    fn(embedding);
    fn(hidden_w);
    fn(hidden_b);
    fn(output_w);
    fn(output_b);
  }
  template <typename Fn>
  void for_each_array(Fn&& fn) const {
    fn(embedding);
    fn(hidden_w);
    fn(hidden_b);
    fn(output_w);
    fn(output_b);
  }

  /// Flat coordinate access across all arrays in declaration order.
  T& at(std::size_t i) {
    for (auto* v : {&embedding, &hidden_w, &hidden_b, &output_w, &output_b}) {
      if (i < v->size()) return (*v)[i];
      i -= v->size();
    }
    throw InvalidArgument("parameter index out of range");
  }

  bool all_finite() const {
    bool ok = true;
    for_each_array([&](const auto& v) {
      for (T x : v) ok = ok && std::isfinite(x);
    });
    return ok;
  }

  template <std::floating_point U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.shape = shape;
    auto conv = [](const auto& v) { return ParamArray<U>(v.begin(), v.end()); };
    out.embedding = conv(embedding);
    out.hidden_w = conv(hidden_w);
    out.hidden_b = conv(hidden_b);
    out.output_w = conv(output_w);
    out.output_b = conv(output_b);
    return out;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

template <std::floating_point T>
using Gradients = ModelParams<T>;

namespace detail {

// Four independent partial sums in a fixed order: deterministic, and lets
// the compiler keep several lanes busy without reassociating.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

/// Left-context window for predicting tokens[t]: the n_ctx tokens before
/// position t, padded with bos at the left edge.
inline std::vector<TokenId> context_window(std::span<const TokenId> tokens, std::size_t t, std::size_t n_ctx) {
  std::vector<TokenId> w(n_ctx, kBosId);
  for (std::size_t i = 0; i < n_ctx; ++i) {
    const std::size_t back = n_ctx - i;  // distance to t
    if (back <= t) w[i] = tokens[t - back];
  }
  return w;
}

/// Scratch buffers reused across forward/backward calls.
template <std::floating_point T>
struct Workspace {
  std::vector<T> input;   // n_ctx * d_emb
  std::vector<T> hidden;  // d_h, post-tanh
  std::vector<T> logits;  // vocab_size
  std::vector<T> d_logits;
  std::vector<T> d_hidden;
  std::vector<T> d_input;

  explicit Workspace(const ModelShape& s)
      : input(s.input_dim()),
        hidden(s.d_h),
        logits(s.vocab_size),
        d_logits(s.vocab_size),
        d_hidden(s.d_h),
        d_input(s.input_dim()) {}
};

namespace detail {

template <std::floating_point T>
void check_window(const ModelParams<T>& p, std::span<const TokenId> window) {
  if (window.size() != p.shape.n_ctx)
    throw InvalidArgument("window length " + std::to_string(window.size()) + " != n_ctx " +
                          std::to_string(p.shape.n_ctx));
  for (TokenId id : window)
    if (id >= p.shape.vocab_size)
      throw InvalidArgument("token id " + std::to_string(id) + " out of range for vocab of " +
                            std::to_string(p.shape.vocab_size));
}

template <std::floating_point T>
void hidden_into(const ModelParams<T>& p, std::span<const TokenId> window, Workspace<T>& ws) {
  const auto& s = p.shape;
  for (std::size_t c = 0; c < s.n_ctx; ++c) {
    const T* e = p.embedding.data() + std::size_t{window[c]} * s.d_emb;
    std::copy(e, e + s.d_emb, ws.input.data() + c * s.d_emb);
  }
  std::copy(p.hidden_b.begin(), p.hidden_b.end(), ws.hidden.begin());
  for (std::size_t i = 0; i < s.input_dim(); ++i)
    axpy(ws.input[i], p.hidden_w.data() + i * s.d_h, ws.hidden.data(), s.d_h);
  for (T& v : ws.hidden) v = std::tanh(v);
}

template <std::floating_point T>
void logits_into(const ModelParams<T>& p, Workspace<T>& ws) {
  const auto& s = p.shape;
  std::copy(p.output_b.begin(), p.output_b.end(), ws.logits.begin());
  for (std::size_t j = 0; j < s.d_h; ++j)
    axpy(ws.hidden[j], p.output_w.data() + j * s.vocab_size, ws.logits.data(), s.vocab_size);
}

}  // namespace detail

template <std::floating_point T>
struct ForwardResult {
  std::vector<T> context;  // hidden activation, length d_h
  NextTokenDistribution dist;
};

/// Hidden activation only; the datastore key for a window.
template <std::floating_point T>
std::vector<T> context_vector(const ModelParams<T>& p, std::span<const TokenId> window, Workspace<T>& ws) {
  detail::check_window(p, window);
  detail::hidden_into(p, window, ws);
  return ws.hidden;
}

template <std::floating_point T>
std::vector<T> context_vector(const ModelParams<T>& p, std::span<const TokenId> window) {
  Workspace<T> ws(p.shape);
  return context_vector(p, window, ws);
}

template <std::floating_point T>
ForwardResult<T> forward(const ModelParams<T>& p, std::span<const TokenId> window, Workspace<T>& ws) {
  detail::check_window(p, window);
  detail::hidden_into(p, window, ws);
  detail::logits_into(p, ws);
  return {ws.hidden, softmax<T>(ws.logits)};
}

template <std::floating_point T>
ForwardResult<T> forward(const ModelParams<T>& p, std::span<const TokenId> window) {
  Workspace<T> ws(p.shape);
  return forward(p, window, ws);
}

/// Adds scale * dLoss/dParams for one (window, target) pair into grads and
/// returns the loss -ln P(target).
template <std::floating_point T>
double accumulate_gradients(const ModelParams<T>& p, std::span<const TokenId> window, TokenId target,
                            Workspace<T>& ws, Gradients<T>& grads, T scale = T(1)) {
  const auto& s = p.shape;
  detail::check_window(p, window);
  if (target >= s.vocab_size) throw InvalidArgument("target id out of range");
  detail::hidden_into(p, window, ws);
  detail::logits_into(p, ws);
  const NextTokenDistribution dist = softmax<T>(ws.logits);
  const double loss = -std::log(dist[target]);

  for (std::size_t v = 0; v < s.vocab_size; ++v) ws.d_logits[v] = static_cast<T>(dist.probs[v]) * scale;
  ws.d_logits[target] -= scale;

  for (std::size_t v = 0; v < s.vocab_size; ++v) grads.output_b[v] += ws.d_logits[v];
  for (std::size_t j = 0; j < s.d_h; ++j) {
    const T* w_row = p.output_w.data() + j * s.vocab_size;
    ws.d_hidden[j] = detail::dot(w_row, ws.d_logits.data(), s.vocab_size);
    detail::axpy(ws.hidden[j], ws.d_logits.data(), grads.output_w.data() + j * s.vocab_size, s.vocab_size);
  }
  for (std::size_t j = 0; j < s.d_h; ++j) ws.d_hidden[j] *= T(1) - ws.hidden[j] * ws.hidden[j];

  for (std::size_t j = 0; j < s.d_h; ++j) grads.hidden_b[j] += ws.d_hidden[j];
  for (std::size_t i = 0; i < s.input_dim(); ++i) {
    const T* w_row = p.hidden_w.data() + i * s.d_h;
    ws.d_input[i] = detail::dot(w_row, ws.d_hidden.data(), s.d_h);
    detail::axpy(ws.input[i], ws.d_hidden.data(), grads.hidden_w.data() + i * s.d_h, s.d_h);
  }
  for (std::size_t c = 0; c < s.n_ctx; ++c) {
    T* e = grads.embedding.data() + std::size_t{window[c]} * s.d_emb;
    for (std::size_t k = 0; k < s.d_emb; ++k) e[k] += ws.d_input[c * s.d_emb + k];
  }
  return loss;
}

template <std::floating_point T>
struct LossAndGradients {
  double loss = 0.0;
  Gradients<T> gradients;
};

template <std::floating_point T>
LossAndGradients<T> loss_and_gradients(const ModelParams<T>& p, std::span<const TokenId> window, TokenId target) {
  LossAndGradients<T> out{0.0, Gradients<T>::zeros(p.shape)};
  Workspace<T> ws(p.shape);
  out.loss = accumulate_gradients(p, window, target, ws, out.gradients);
  return out;
}

/// ln P(tokens[t] | window(t)) for every position, bos-padded at the left.
template <std::floating_point T>
std::vector<double> token_log_probs(const ModelParams<T>& p, std::span<const TokenId> tokens) {
  Workspace<T> ws(p.shape);
  std::vector<double> out(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto window = context_window(tokens, t, p.shape.n_ctx);
    auto r = forward(p, window, ws);
    out[t] = std::log(r.dist[tokens[t]]);
  }
  return out;
}

/// exp of the mean negative log-likelihood over every position.
template <std::floating_point T>
double perplexity(const ModelParams<T>& p, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InvalidArgument("perplexity: empty token sequence");
  double nll = 0.0;
  for (double lp : token_log_probs(p, tokens)) nll -= lp;
  return std::exp(nll / static_cast<double>(tokens.size()));
}

/// Random initialization. When unigram counts are given the output bias
/// starts at the smoothed log unigram distribution.
template <std::floating_point T>
ModelParams<T> init_params(const ModelShape& shape, std::uint64_t seed,
                           std::span<const std::uint64_t> unigram_counts = {}) {
  auto p = ModelParams<T>::zeros(shape);
  Rng rng(seed);
  auto fill = [&](auto& v, double a) {
    for (T& x : v) x = static_cast<T>(rng.uniform(-a, a));
  };
  fill(p.embedding, 0.1);
  fill(p.hidden_w, 1.0 / std::sqrt(static_cast<double>(shape.input_dim())));
  fill(p.output_w, 1.0 / std::sqrt(static_cast<double>(shape.d_h)));
  if (!unigram_counts.empty()) {
    if (unigram_counts.size() != shape.vocab_size) throw InvalidArgument("unigram counts size != vocab size");
    const double total = std::accumulate(unigram_counts.begin(), unigram_counts.end(), 0.0);
    const double denom = total + static_cast<double>(shape.vocab_size);
    for (std::size_t v = 0; v < shape.vocab_size; ++v)
      p.output_b[v] = static_cast<T>(std::log((static_cast<double>(unigram_counts[v]) + 1.0) / denom));
  }
  return p;
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using RowVectorMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using ConstRowVectorMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

}  // namespace detail

/// Scratch matrices for minibatch evaluation; rows are examples.
template <std::floating_point T>
struct BatchWorkspace {
  detail::RowMatrix<T> input, hidden, logits, d_hidden, d_input;
  explicit BatchWorkspace(const ModelShape& s, std::size_t batch)
      : input(batch, s.input_dim()),
        hidden(batch, s.d_h),
        logits(batch, s.vocab_size),
        d_hidden(batch, s.d_h),
        d_input(batch, s.input_dim()) {}
};

/// Batched forward pass for windows(b) = context_window(tokens, positions[b]).
/// Leaves hidden activations and, unless hidden_only, logits in ws; returns
/// the number of rows filled.
template <std::floating_point T>
std::size_t batch_hidden_and_logits(const ModelParams<T>& p, std::span<const TokenId> tokens,
                                    std::span<const std::size_t> positions, BatchWorkspace<T>& ws,
                                    bool hidden_only = false) {
  const auto& s = p.shape;
  const std::size_t rows = positions.size();
  if (static_cast<std::size_t>(ws.input.rows()) < rows) throw InvalidArgument("batch larger than workspace");
  for (std::size_t b = 0; b < rows; ++b) {
    const auto window = context_window(tokens, positions[b], s.n_ctx);
    detail::check_window(p, window);
    for (std::size_t c = 0; c < s.n_ctx; ++c) {
      const T* e = p.embedding.data() + std::size_t{window[c]} * s.d_emb;
      std::copy(e, e + s.d_emb, ws.input.row(b).data() + c * s.d_emb);
    }
  }
  const auto n = static_cast<Eigen::Index>(rows);
  detail::ConstMatrixMap<T> w1(p.hidden_w.data(), s.input_dim(), s.d_h);
  detail::ConstRowVectorMap<T> b1(p.hidden_b.data(), s.d_h);
  ws.hidden.topRows(n).noalias() = ws.input.topRows(n) * w1;
  ws.hidden.topRows(n).rowwise() += b1;
  ws.hidden.topRows(n) = ws.hidden.topRows(n).array().tanh().matrix();
  if (hidden_only) return rows;
  detail::ConstMatrixMap<T> w2(p.output_w.data(), s.d_h, s.vocab_size);
  detail::ConstRowVectorMap<T> b2(p.output_b.data(), s.vocab_size);
  ws.logits.topRows(n).noalias() = ws.hidden.topRows(n) * w2;
  ws.logits.topRows(n).rowwise() += b2;
  return rows;
}

/// Minibatch counterpart of accumulate_gradients: writes the gradient of
/// scale * sum of per-example losses into grads (overwriting it) and returns
/// the per-example losses.
template <std::floating_point T>
std::vector<double> batch_gradients(const ModelParams<T>& p, std::span<const TokenId> tokens,
                                    std::span<const std::size_t> positions, BatchWorkspace<T>& ws,
                                    Gradients<T>& grads, T scale) {
  const auto& s = p.shape;
  const std::size_t rows = batch_hidden_and_logits(p, tokens, positions, ws);
  const auto n = static_cast<Eigen::Index>(rows);
  std::vector<double> losses(rows);

  // logits -> scale * (softmax - onehot), in place
  for (std::size_t b = 0; b < rows; ++b) {
    T* row = ws.logits.row(b).data();
    double mx = -INFINITY;
    for (std::size_t v = 0; v < s.vocab_size; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    const TokenId target = tokens[positions[b]];
    const double target_logit = static_cast<double>(row[target]) - mx;
    double sum = 0.0;
    for (std::size_t v = 0; v < s.vocab_size; ++v) {
      row[v] = std::exp(row[v] - static_cast<T>(mx));
      sum += static_cast<double>(row[v]);
    }
    losses[b] = std::log(sum) - target_logit;
    const T norm = static_cast<T>(scale / sum);
    for (std::size_t v = 0; v < s.vocab_size; ++v) row[v] *= norm;
    row[target] -= scale;
  }

  detail::ConstMatrixMap<T> w1(p.hidden_w.data(), s.input_dim(), s.d_h);
  detail::ConstMatrixMap<T> w2(p.output_w.data(), s.d_h, s.vocab_size);
  detail::MatrixMap<T> gw1(grads.hidden_w.data(), s.input_dim(), s.d_h);
  detail::MatrixMap<T> gw2(grads.output_w.data(), s.d_h, s.vocab_size);
  detail::RowVectorMap<T> gb1(grads.hidden_b.data(), s.d_h);
  detail::RowVectorMap<T> gb2(grads.output_b.data(), s.vocab_size);

  auto d_logits = ws.logits.topRows(n);
  auto hidden = ws.hidden.topRows(n);
  gw2.noalias() = hidden.transpose() * d_logits;
  gb2 = d_logits.colwise().sum();
  ws.d_hidden.topRows(n).noalias() = d_logits * w2.transpose();
  ws.d_hidden.topRows(n).array() *= (T(1) - hidden.array().square());
  gw1.noalias() = ws.input.topRows(n).transpose() * ws.d_hidden.topRows(n);
  gb1 = ws.d_hidden.topRows(n).colwise().sum();
  ws.d_input.topRows(n).noalias() = ws.d_hidden.topRows(n) * w1.transpose();

  std::fill(grads.embedding.begin(), grads.embedding.end(), T(0));
  for (std::size_t b = 0; b < rows; ++b) {
    const auto window = context_window(tokens, positions[b], s.n_ctx);
    for (std::size_t c = 0; c < s.n_ctx; ++c) {
      T* e = grads.embedding.data() + std::size_t{window[c]} * s.d_emb;
      const T* d = ws.d_input.row(b).data() + c * s.d_emb;
      for (std::size_t k = 0; k < s.d_emb; ++k) e[k] += d[k];
    }
  }
  return losses;
}

struct TrainConfig {
  std::uint32_t epochs = 5;
  std::uint32_t batch_size = 32;
  double learning_rate = 0.1;
  double clip_norm = 5.0;
  /// Positions visited per epoch; 0 means the whole corpus.
  std::size_t positions_per_epoch = 0;
  /// Held-out tokens scored after each epoch; 0 means all of them.
  std::size_t valid_max_tokens = 0;
};

struct EpochLog {
  std::uint32_t epoch = 0;
  double train_loss = 0.0;
  double valid_ppl = 0.0;  // NaN when no held-out data
  double learning_rate = 0.0;
};

template <std::floating_point T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<EpochLog> log;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Minibatch SGD with a per-seed shuffling order, global-norm gradient
/// clipping and learning-rate halving whenever held-out perplexity fails to
/// improve. Single-threaded and bitwise reproducible.
template <std::floating_point T>
TrainResult<T> train(std::span<const TokenId> corpus, std::span<const TokenId> valid, const ModelShape& shape,
                     const TrainConfig& cfg, std::uint64_t seed,
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
  shape.validate();
  if (corpus.size() <= shape.n_ctx) throw InvalidArgument("train: corpus must be longer than n_ctx");
  if (cfg.batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");

  std::vector<std::uint64_t> counts(shape.vocab_size, 0);
  for (TokenId t : corpus) {
    if (t >= shape.vocab_size) throw InvalidArgument("train: corpus token id out of range");
    ++counts[t];
  }
  TrainResult<T> out{init_params<T>(shape, seed, counts), {}};
  auto& params = out.params;

  Rng rng(mix_seed(seed, 0x7261696eULL));
  BatchWorkspace<T> ws(shape, cfg.batch_size);
  auto grads = Gradients<T>::zeros(shape);
  std::vector<std::size_t> order(corpus.size());
  double lr = cfg.learning_rate;
  double best_valid = INFINITY;
  const auto valid_slice = valid.first(cfg.valid_max_tokens == 0 ? valid.size()
                                                                 : std::min(valid.size(), cfg.valid_max_tokens));

  for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    const std::size_t n_pos =
        cfg.positions_per_epoch == 0 ? order.size() : std::min(order.size(), cfg.positions_per_epoch);

    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < n_pos; start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(n_pos, start + cfg.batch_size);
      const T scale = T(1) / static_cast<T>(end - start);
      const auto batch = std::span<const std::size_t>(order).subspan(start, end - start);
      const auto losses = batch_gradients(params, corpus, batch, ws, grads, scale);
      for (std::size_t b = 0; b < losses.size(); ++b) {
        if (!std::isfinite(losses[b]))
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + ", position " + std::to_string(batch[b]));
        loss_sum += losses[b];
      }
      double sq = 0.0;
      grads.for_each_array([&](const auto& v) {
        sq += static_cast<double>(detail::ConstRowVectorMap<T>(v.data(), static_cast<Eigen::Index>(v.size())).squaredNorm());
      });
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm))
        throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      const double factor = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
      const T step_size = static_cast<T>(lr * factor);
      auto apply = [&](auto& w, const auto& g) {
        detail::axpy(-step_size, g.data(), w.data(), w.size());
      };
      apply(params.embedding, grads.embedding);
      apply(params.hidden_w, grads.hidden_w);
      apply(params.hidden_b, grads.hidden_b);
      apply(params.output_w, grads.output_w);
      apply(params.output_b, grads.output_b);
    }

    EpochLog log{epoch, n_pos ? loss_sum / static_cast<double>(n_pos) : 0.0, NAN, lr};
    if (!valid_slice.empty()) {
      log.valid_ppl = perplexity(params, valid_slice);
      if (!std::isfinite(log.valid_ppl))
        throw TrainingError("non-finite held-out perplexity after epoch " + std::to_string(epoch));
      if (log.valid_ppl >= best_valid) lr *= 0.5;
      best_valid = std::min(best_valid, log.valid_ppl);
    }
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return out;
}

inline constexpr std::string_view kModelMagic = "KNLM";
inline constexpr std::uint32_t kModelVersion = 1;

/// Header (magic, version, vocab_size, n_ctx, d_emb, d_h as u32) followed by
/// the five arrays as float32 in declaration order.
template <std::floating_point T>
void save_model(const ModelParams<T>& p, const std::string& path) {
  io::Writer w(path);
  w.magic(kModelMagic);
  w.scalar<std::uint32_t>(kModelVersion);
  w.scalar<std::uint32_t>(p.shape.vocab_size);
  w.scalar<std::uint32_t>(p.shape.n_ctx);
  w.scalar<std::uint32_t>(p.shape.d_emb);
  w.scalar<std::uint32_t>(p.shape.d_h);
  p.for_each_array([&](const auto& v) {
    if constexpr (std::is_same_v<T, float>) {
      w.array<float>(v);
    } else {
      std::vector<float> f(v.begin(), v.end());
      w.array<float>(f);
    }
  });
  w.finish();
}

inline ModelParams<float> load_model(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kModelMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kModelVersion) throw FormatError(path + ": unsupported model version " + std::to_string(version));
  ModelShape s;
  s.vocab_size = r.scalar<std::uint32_t>();
  s.n_ctx = r.scalar<std::uint32_t>();
  s.d_emb = r.scalar<std::uint32_t>();
  s.d_h = r.scalar<std::uint32_t>();
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(path + ": " + e.what());
  }
  ModelParams<float> p;
  p.shape = s;
  auto read = [&](std::size_t n) {
    const auto v = r.array<float>(n);
    return ParamArray<float>(v.begin(), v.end());
  };
  p.embedding = read(std::size_t{s.vocab_size} * s.d_emb);
  p.hidden_w = read(s.input_dim() * s.d_h);
  p.hidden_b = read(s.d_h);
  p.output_w = read(std::size_t{s.d_h} * s.vocab_size);
  p.output_b = read(s.vocab_size);
  r.expect_end();
  if (!p.all_finite()) throw FormatError(path + ": non-finite parameter");
  return p;
}

}  // namespace knnlm
